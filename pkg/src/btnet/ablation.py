"""Model-ladder sweeps: train every configuration over several seeds and tabulate medians/IQRs."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

from .config import LADDER, RunConfig, ladder_label
from .datagen import JetDataset
from .metrics import median_iqr, roc_summary
from .models import ModelConfig, build_model
from .training import evaluate, train

log = logging.getLogger(__name__)


@dataclass
class RunRecord:
    label: str
    seed: int
    auc: float
    rejections: dict[str, float]
    best_epoch: int
    seconds: float

    def to_dict(self) -> dict:
        return {"label": self.label, "seed": self.seed, "auc": self.auc,
                "rejections": {k: _json_float(v) for k, v in self.rejections.items()},
                "best_epoch": self.best_epoch, "seconds": self.seconds}


@dataclass
class AblationResult:
    records: list[RunRecord] = field(default_factory=list)
    efficiencies: tuple = (0.7, 0.85)

    def labels(self) -> list[str]:
        seen = []
        for r in self.records:
            if r.label not in seen:
                seen.append(r.label)
        return seen

    def summary(self) -> dict[str, dict]:
        """Per label: median and IQR of the AUC and of each rejection."""
        out = {}
        for label in self.labels():
            runs = [r for r in self.records if r.label == label]
            row = {"n_runs": len(runs), "auc": median_iqr([r.auc for r in runs])}
            for key in _rej_keys(self.efficiencies):
                row[key] = median_iqr([r.rejections[key] for r in runs])
            out[label] = row
        return out

    def relative_improvement(self, baseline: str = "baseline") -> dict[str, dict[str, float]]:
        """R_model / R_baseline - 1 on median rejections; empty without a baseline row."""
        summ = self.summary()
        if baseline not in summ:
            return {}
        base = summ[baseline]
        return {label: {key: _ratio(row[key][0], base[key][0]) - 1.0 for key in _rej_keys(self.efficiencies)}
                for label, row in summ.items()}

    def table(self) -> str:
        summ, rel = self.summary(), self.relative_improvement()
        keys = _rej_keys(self.efficiencies)
        header = ["model", "runs", "AUC median (IQR)"]
        for key in keys:
            header += [f"{key} median (IQR)", f"{key} vs base"]
        rows = [header]
        for label, row in summ.items():
            cells = [label, str(row["n_runs"]), _fmt_pair(row["auc"], ".4f")]
            for key in keys:
                cells.append(_fmt_pair(row[key], ".1f"))
                cells.append(f"{100 * rel[label][key]:+.1f}%" if rel else "n/a")
            rows.append(cells)
        widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
        lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows]
        lines.insert(1, "  ".join("-" * w for w in widths))
        return "\n".join(lines)

    def to_dict(self) -> dict:
        summ = self.summary()
        return {
            "runs": [r.to_dict() for r in self.records],
            "summary": {label: {k: (v if k == "n_runs" else {"median": _json_float(v[0]), "iqr": _json_float(v[1])})
                                for k, v in row.items()} for label, row in summ.items()},
            "relative_improvement": {label: {k: _json_float(v) for k, v in row.items()}
                                     for label, row in self.relative_improvement().items()},
        }


def _rej_keys(efficiencies) -> list[str]:
    return [f"R{int(round(100 * e))}" for e in efficiencies]


def _ratio(a: float, b: float) -> float:
    if math.isinf(b):
        return math.nan if math.isinf(a) else 0.0
    return a / b


def _json_float(x: float):
    """JSON has no infinities; encode them as strings."""
    if isinstance(x, float) and not math.isfinite(x):
        return "nan" if math.isnan(x) else ("inf" if x > 0 else "-inf")
    return x


def _fmt_pair(pair, spec: str) -> str:
    med, iqr = pair
    return f"{med:{spec}} ({iqr:{spec}})"


def model_config_for(cfg: RunConfig, label: str, seed: int) -> ModelConfig:
    rows = {ladder_label(*row): row for row in LADDER}
    model_class, bil, so2 = rows[label]
    return replace(cfg.model, model_class=model_class, enable_bilinear=bil, enable_so2=so2, seed=seed)


def run_ablation(cfg: RunConfig, train_ds: JetDataset, val_ds: JetDataset, test_ds: JetDataset,
                 out_dir: Path | None = None, labels: list[str] | None = None) -> AblationResult:
    """Train ``n_seeds`` runs per configuration; seeds are ``cfg.seed + k``."""
    base_seed = cfg.require_seed()
    labels = list(labels if labels is not None else cfg.ablate.configs)
    effs = tuple(cfg.ablate.efficiencies)
    result = AblationResult(efficiencies=effs)
    for label in labels:
        for k in range(cfg.ablate.n_seeds):
            seed = base_seed + k
            t0 = time.perf_counter()
            model = build_model(model_config_for(cfg, label, seed))
            run_dir = None if out_dir is None else Path(out_dir) / "runs" / f"{label}_seed{seed}"
            res = train(model, train_ds, val_ds, replace(cfg.train, seed=seed), run_dir,
                        extra_meta={"run_config": cfg.to_dict(), "label": label})
            scores, _ = evaluate(model, test_ds, cfg.train.eval_batch_size)
            summ = roc_summary(scores, test_ds.label, effs)
            rec = RunRecord(label, seed, summ.auc, {f"R{int(round(100 * e))}": r for e, r in summ.rejections.items()},
                            res.best_epoch, time.perf_counter() - t0)
            log.info("%s seed %d: AUC %.4f %s (%.1f s)", label, seed, rec.auc, rec.rejections, rec.seconds)
            result.records.append(rec)
    if out_dir is not None:
        write_ablation(out_dir, result, cfg)
    return result


def write_ablation(out_dir, result: AblationResult, cfg: RunConfig) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "ablation.txt").write_text(result.table() + "\n")
    record = {"config": cfg.to_dict(), **result.to_dict()}
    (out_dir / "ablation.json").write_text(json.dumps(record, indent=2) + "\n")


def medians(result: AblationResult, key: str = "auc") -> dict[str, float]:
    return {label: row[key][0] for label, row in result.summary().items()}

