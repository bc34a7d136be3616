"""Confusion matrices, per-class and macro F1, and method comparisons."""

import csv
import io
import json
from dataclasses import dataclass, field, replace

import numpy as np

from .data import LANGUAGES, build_vocab, make_batches, training_pool
from .errors import ConfigError, ContractError, TrainingAborted

CLASS_NAMES = {0: "idiomatic", 1: "literal"}
DISPLAY = {"standard": "Standard", "smart": "SMART", "adv_supervised": "ADV"}


@dataclass
class ConfusionMatrix:
    """2x2 counts; rows are gold classes, columns predicted classes."""

    counts: np.ndarray

    @property
    def total(self):
        return int(self.counts.sum())

    def tolist(self):
        return self.counts.tolist()


def confusion_matrix(preds, gold):
    preds = np.asarray(preds, dtype=np.int64).reshape(-1)
    gold = np.asarray(gold, dtype=np.int64).reshape(-1)
    if preds.shape != gold.shape:
        raise ContractError(f"preds ({preds.size}) and gold ({gold.size}) differ in length")
    for name, arr in (("preds", preds), ("gold", gold)):
        if arr.size and (arr.min() < 0 or arr.max() > 1):
            raise ContractError(f"{name} values must be 0 or 1")
    counts = np.zeros((2, 2), dtype=np.int64)
    np.add.at(counts, (gold, preds), 1)
    return ConfusionMatrix(counts)


def _ratio(num, den):
    return num / den if den else 0.0


def per_class_scores(cm):
    c = cm.counts
    out = {}
    for k in (0, 1):
        tp = int(c[k, k])
        fp = int(c[:, k].sum()) - tp
        fn = int(c[k, :].sum()) - tp
        out[k] = {
            "precision": _ratio(tp, tp + fp),
            "recall": _ratio(tp, tp + fn),
            "f1": _ratio(2 * tp, 2 * tp + fp + fn),
            "support": tp + fn,
        }
    return out


def macro_f1(cm):
    """Mean over both classes of 2TP / (2TP + FP + FN), with 0/0 taken as 0."""
    scores = per_class_scores(cm)
    return (scores[0]["f1"] + scores[1]["f1"]) / 2.0


@dataclass
class MetricsReport:
    confusion: list
    per_class: dict
    macro_f1: float
    accuracy: float
    n_examples: int
    per_language: dict = field(default_factory=dict)

    @classmethod
    def from_predictions(cls, preds, gold, languages=None):
        cm = confusion_matrix(preds, gold)
        per_lang = {}
        if languages is not None:
            languages = np.asarray(languages)
            for lang in [l for l in LANGUAGES if l in set(languages)]:
                sel = languages == lang
                sub = cls.from_predictions(np.asarray(preds)[sel], np.asarray(gold)[sel])
                per_lang[lang] = sub.to_dict()
                per_lang[lang].pop("per_language")
        return cls(
            confusion=cm.tolist(),
            per_class={CLASS_NAMES[k]: v for k, v in per_class_scores(cm).items()},
            macro_f1=macro_f1(cm),
            accuracy=_ratio(int(np.trace(cm.counts)), cm.total),
            n_examples=cm.total,
            per_language=per_lang,
        )

    @property
    def cm(self):
        return ConfusionMatrix(np.array(self.confusion, dtype=np.int64))

    def to_dict(self):
        return {
            "confusion": self.confusion,
            "per_class": self.per_class,
            "macro_f1": self.macro_f1,
            "accuracy": self.accuracy,
            "n_examples": self.n_examples,
            "per_language": self.per_language,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d):
        return cls(d["confusion"], d["per_class"], d["macro_f1"], d["accuracy"],
                   d["n_examples"], d.get("per_language", {}))

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def evaluate_split(model, split, vocab, batch_size=64, max_len=None):
    from .model import predict

    if len(vocab) > model.config.vocab_size:
        raise ConfigError(
            f"vocab has {len(vocab)} tokens but the model embeds only {model.config.vocab_size}"
        )
    if not len(split.records):
        raise ConfigError(f"split {split.name!r} has no records to evaluate")
    max_len = max_len or model.config.max_len
    preds, gold, langs = [], [], []
    for batch in make_batches(split.records, vocab, batch_size, max_len, shuffle=False):
        preds.append(predict(model, batch))
        gold.append(batch.labels)
        langs.extend(batch.languages)
    return MetricsReport.from_predictions(np.concatenate(preds), np.concatenate(gold), langs)


# ---------------------------------------------------------------------------
# method comparison
# ---------------------------------------------------------------------------


@dataclass
class ComparisonTable:
    cells: list
    methods: list
    settings: list

    def summary(self):
        rows = []
        for setting in self.settings:
            for method in self.methods:
                vals = [c["dev_macro_f1"] for c in self.cells
                        if c["setting"] == setting and c["method"] == method and c["status"] == "ok"]
                failed = sum(1 for c in self.cells if c["setting"] == setting
                             and c["method"] == method and c["status"] != "ok")
                rows.append({
                    "setting": setting,
                    "method": method,
                    "mean": float(np.mean(vals)) if vals else None,
                    "std": float(np.std(vals)) if vals else None,
                    "n_runs": len(vals),
                    "n_failed": failed,
                })
        return rows

    def verdicts(self):
        """Per setting and adversarial method: mean F1 minus the standard mean."""
        rows = self.summary()
        out = []
        for setting in self.settings:
            base = next((r for r in rows if r["setting"] == setting and r["method"] == "standard"), None)
            for r in rows:
                if r["setting"] != setting or r["method"] == "standard" or base is None:
                    continue
                if r["mean"] is None or base["mean"] is None:
                    out.append({"setting": setting, "method": r["method"], "margin": None, "holds": None})
                    continue
                margin = r["mean"] - base["mean"]
                out.append({"setting": setting, "method": r["method"], "margin": margin,
                            "holds": margin >= 0})
        return out

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["setting", "method", "mean_macro_f1", "std_macro_f1", "n_runs", "n_failed"])
        for r in self.summary():
            w.writerow([r["setting"], r["method"],
                        "" if r["mean"] is None else f"{r['mean']:.6f}",
                        "" if r["std"] is None else f"{r['std']:.6f}",
                        r["n_runs"], r["n_failed"]])
        return buf.getvalue()

    def to_text(self):
        lines = [f"{'method':<10} " + " ".join(f"{s:>22}" for s in self.settings)]
        rows = self.summary()
        for method in self.methods:
            cols = []
            for s in self.settings:
                r = next(x for x in rows if x["setting"] == s and x["method"] == method)
                if r["mean"] is None:
                    cols.append(f"{'FAILED':>22}")
                else:
                    mark = "*" if r["n_failed"] else " "
                    cols.append(f"{r['mean']:.4f} +/- {r['std']:.4f}{mark}".rjust(22))
            lines.append(f"{DISPLAY.get(method, method):<10} " + " ".join(cols))
        lines.append("")
        for v in self.verdicts():
            if v["margin"] is None:
                lines.append(f"{v['setting']}: {v['method']} vs standard: undecided (failed runs)")
            else:
                word = "adversarial >= standard" if v["holds"] else "adversarial < standard"
                lines.append(f"{v['setting']}: {v['method']} vs standard: {word} "
                             f"(margin {v['margin']:+.4f})")
        if any(r["n_failed"] for r in rows):
            lines.append("* some runs aborted; means cover the completed runs only")
        return "\n".join(lines) + "\n"


def _run_cell(args):
    from .model import init_model
    from .training import derive_seed, train_run

    setting, splits, method, seed, model_cfg, train_cfg, adv_cfg, max_vocab = args
    vocab = build_vocab(training_pool(splits, setting), max_vocab)
    mcfg = replace(model_cfg, vocab_size=len(vocab), seed=derive_seed(seed, "init"))
    tcfg = replace(train_cfg, seed=seed, method=method)
    cell = {"setting": setting, "method": method, "seed": seed}
    try:
        _, history = train_run(init_model(mcfg, vocab), splits, tcfg, adv_cfg, vocab, setting)
    except TrainingAborted as exc:
        return {**cell, "status": "aborted", "error": str(exc), "dev_macro_f1": None}
    best = next((e for e in history.epochs if e["epoch"] == history.best_epoch), {})
    return {**cell, "status": "ok", "dev_macro_f1": best.get("dev_macro_f1")}


def compare_methods(datasets, methods, seeds, model_cfg, train_cfg, adv_cfg, max_vocab=2048, workers=1):
    """Train every (setting, method, seed) cell and tabulate dev macro-F1.

    ``datasets`` maps a setting name to its list of splits. Every method sees
    the same data order for a given seed, since shuffling derives from the
    seed alone.
    """
    from .training import METHODS

    methods = list(methods)
    if len(methods) < 2:
        raise ConfigError("compare needs at least two methods")
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise ConfigError(f"unknown method(s): {', '.join(unknown)}")
    if not seeds:
        raise ConfigError("compare needs at least one seed")
    jobs = [(setting, splits, m, s, model_cfg, train_cfg, adv_cfg, max_vocab)
            for setting, splits in datasets.items() for m in methods for s in seeds]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=workers) as pool:
            cells = list(pool.map(_run_cell, jobs))
    else:
        cells = [_run_cell(j) for j in jobs]
    return ComparisonTable(cells, list(dict.fromkeys(methods)), list(datasets))
