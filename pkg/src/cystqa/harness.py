"""Experiment runners: segmentation evaluation, noisy-label rejection, selection.

All runners share one preparation step (load stack, drop unannotated images,
split, preprocess, resize labels to the working resolution) and are
deterministic given a config and seed: per-image random draws derive from
seed sequences keyed on (seed, experiment, repetition, image index), and
every output file except the run manifest is byte-stable across runs.
"""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .baseline import RegionalProposals, fit_baseline, predict_baseline
from .dataset import ImageRecord, StackSplit, filter_annotated, load_stack, make_split, save_mask_png, load_mask_png
from .metrics import confusion, jsonable
from .paresn import EsnHyperParams, init_paresn, predict_paresn, train_paresn
from .preprocess import DEFAULT_STRUCT_DIAMETER, PreprocessedPlanes, WORK_SIZE, bilinear_resize, preprocess
from .rcap import RcapConfig, rcap
from .tlsa import TAU_G1, TAU_G2, TAU_MANUAL, TlsaConfig, tlsa

LABEL_VARIANTS = ("G1", "G2", "G1andG2")
PROPOSAL_NAMES = ("P1", "P2", "P3")
METRIC_NAMES = ("dc", "iou", "sen", "spec", "acc")


@dataclass
class ExperimentConfig:
    stack_dir: str
    out_dir: str
    model: str = "paresn"              # baseline | paresn | external
    train_label: str = "G1"            # G1 | G2 | G1andG2
    tlsa: TlsaConfig = field(default_factory=TlsaConfig)
    rcap: RcapConfig = field(default_factory=RcapConfig)
    rcap_label: str | None = None      # label corrupted in eval-rcap; defaults to train_label
    dump_noisy: bool = False           # write generated noisy masks next to the metrics
    repetitions: int = 20
    rng_seed: int = 0
    external_rps_dir: str | None = None
    baseline_reps: int = 1             # >1 enables the random-training-image protocol
    struct_diameter: int = DEFAULT_STRUCT_DIAMETER
    esn_m: int = 100
    esn_w_m: int = 100
    figures: bool = True

    def validate(self) -> None:
        if self.model not in ("baseline", "paresn", "external"):
            raise ValueError(f"unknown model {self.model!r}")
        if self.train_label not in LABEL_VARIANTS:
            raise ValueError(f"unknown train_label {self.train_label!r}")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if self.model == "external" and not self.external_rps_dir:
            raise ValueError("external model requires external_rps_dir")


@dataclass
class SelectionSummary:
    frac_g1: float
    frac_g2: float
    frac_manual: float
    mean_accuracy: float | None = None
    std_accuracy: float | None = None

    def as_dict(self) -> dict:
        return {
            "frac_g1": self.frac_g1,
            "frac_g2": self.frac_g2,
            "frac_manual": self.frac_manual,
            "mean_accuracy": self.mean_accuracy,
            "std_accuracy": self.std_accuracy,
        }


@dataclass
class PreparedStack:
    records: list[ImageRecord]
    dropped_ids: list[str]
    split: StackSplit
    planes: dict[str, PreprocessedPlanes]
    labels: dict[str, dict[str, np.ndarray]]

    def record(self, image_id: str) -> ImageRecord:
        return next(r for r in self.records if r.id == image_id)


def resize_mask(mask: np.ndarray, size: int = WORK_SIZE) -> np.ndarray:
    if mask.shape == (size, size):
        return mask.astype(bool)
    return bilinear_resize(mask.astype(float), size, size) > 0.5


def prepare(cfg: ExperimentConfig) -> PreparedStack:
    records = load_stack(cfg.stack_dir)
    kept, dropped = filter_annotated(records)
    split = make_split(kept)
    planes = {r.id: preprocess(r.image, s_d=cfg.struct_diameter) for r in kept}
    labels = {}
    for r in kept:
        g1 = resize_mask(r.labels["G1"])
        g2 = resize_mask(r.labels["G2"])
        labels[r.id] = {"G1": g1, "G2": g2, "G1andG2": g1 & g2}
    return PreparedStack(records=kept, dropped_ids=dropped, split=split, planes=planes, labels=labels)


def _train_pairs(prepared: PreparedStack, train_ids: list[str], train_label: str):
    return [(prepared.planes[i], prepared.labels[i][train_label]) for i in train_ids]


def fit_model(cfg: ExperimentConfig, prepared: PreparedStack):
    """Fit the configured model on the training split; returns (model, source tag)."""
    pairs = _train_pairs(prepared, prepared.split.train_ids, cfg.train_label)
    if cfg.model == "baseline":
        model = fit_baseline(pairs)
        return model, f"baseline(s_d={model.s_d},theta={model.theta})"
    if cfg.model == "paresn":
        hp = EsnHyperParams(m=cfg.esn_m, w_m=cfg.esn_w_m, rng_seed=cfg.rng_seed)
        model = train_paresn(init_paresn(hp), pairs)
        return model, f"paresn(seed={cfg.rng_seed})"
    proposals = ingest_external_rps(cfg.external_rps_dir, ids=prepared.split.test_ids)
    return proposals, "external"


def predict_proposals(cfg: ExperimentConfig, model, prepared: PreparedStack, image_id: str) -> RegionalProposals:
    if cfg.model == "baseline":
        return predict_baseline(model, prepared.planes[image_id])
    if cfg.model == "paresn":
        return predict_paresn(model, prepared.planes[image_id])
    return model[image_id]


def ingest_external_rps(
    dir_path: str | Path, ids: list[str], size: int = WORK_SIZE
) -> dict[str, RegionalProposals]:
    """Load externally produced proposals `<id>.P{1,2,3}.png` for the given ids."""
    dir_path = Path(dir_path)
    out = {}
    for image_id in ids:
        masks = []
        for k in (1, 2, 3):
            path = dir_path / f"{image_id}.P{k}.png"
            if not path.exists():
                raise FileNotFoundError(f"missing proposal P{k} for id {image_id!r}: {path}")
            mask = load_mask_png(path)
            if mask.shape != (size, size):
                raise ValueError(
                    f"proposal P{k} for id {image_id!r} has shape {mask.shape}, expected {(size, size)}"
                )
            masks.append(mask)
        out[image_id] = RegionalProposals(p1=masks[0], p2=masks[1], p3=masks[2])
    return out


def _mean_metric_table(per_image: list[dict]) -> dict:
    """Average per-image metric dicts into {label: {P: {metric: value}}}."""
    table: dict = {}
    for label in LABEL_VARIANTS:
        table[label] = {}
        for prop in PROPOSAL_NAMES:
            table[label][prop] = {
                m: float(np.mean([row[label][prop][m] for row in per_image]))
                for m in METRIC_NAMES
            }
    return table


def _eval_one_model(cfg, model, prepared: PreparedStack, test_ids: list[str]) -> dict:
    per_image = []
    for image_id in test_ids:
        rps = predict_proposals(cfg, model, prepared, image_id)
        roi = prepared.planes[image_id].roi
        row: dict = {}
        for label in LABEL_VARIANTS:
            target = prepared.labels[image_id][label]
            row[label] = {}
            for prop_name, mask in zip(PROPOSAL_NAMES, rps.as_tuple()):
                conf = confusion(mask, target, roi)
                row[label][prop_name] = {m: getattr(conf, m) for m in METRIC_NAMES}
        per_image.append(row)
    return _mean_metric_table(per_image)


def run_segmentation_eval(cfg: ExperimentConfig, prepared: PreparedStack | None = None) -> dict:
    """Train on the configured label, evaluate proposals on the test split.

    Returns {label_variant: {P_i: {metric: mean-over-test-images}}} and writes
    metrics.json, tables.txt and a figure to cfg.out_dir.
    """
    cfg.validate()
    prepared = prepared or prepare(cfg)
    test_ids = sorted(prepared.split.test_ids)

    if cfg.model == "baseline" and cfg.baseline_reps > 1:
        rng = np.random.default_rng(cfg.rng_seed)
        tables = []
        for _ in range(cfg.baseline_reps):
            train_id = prepared.split.train_ids[int(rng.integers(len(prepared.split.train_ids)))]
            model = fit_baseline(_train_pairs(prepared, [train_id], cfg.train_label))
            tables.append(_eval_one_model(cfg, model, prepared, test_ids))
        table = {
            label: {
                prop: {
                    m: float(np.mean([t[label][prop][m] for t in tables]))
                    for m in METRIC_NAMES
                }
                for prop in PROPOSAL_NAMES
            }
            for label in LABEL_VARIANTS
        }
        source = f"baseline(reps={cfg.baseline_reps})"
    else:
        model, source = fit_model(cfg, prepared)
        table = _eval_one_model(cfg, model, prepared, test_ids)

    out_dir = _ensure_out(cfg)
    payload = {
        "experiment": "segmentation_eval",
        "model_source": source,
        "train_label": cfg.train_label,
        "n_test": len(test_ids),
        "metrics": table,
    }
    _write_json(out_dir / "metrics.json", payload)
    (out_dir / "tables.txt").write_text(format_segmentation_table(table, title=source))
    _write_manifest(cfg, "eval-seg", prepared)
    if cfg.figures:
        from . import report

        report.render_segmentation_metrics(table, out_dir / "segmentation_metrics.png")
    return table


def format_segmentation_table(table: dict, title: str = "") -> str:
    """Fixed-width text table: metrics x (label variant, proposal)."""
    headers = [f"{label}/{prop}" for label in LABEL_VARIANTS for prop in PROPOSAL_NAMES]
    lines = []
    if title:
        lines.append(title)
    lines.append(f"{'metric':<8}" + "".join(f"{h:>14}" for h in headers))
    for m in METRIC_NAMES:
        cells = [table[label][prop][m] for label in LABEL_VARIANTS for prop in PROPOSAL_NAMES]
        lines.append(f"{m:<8}" + "".join(f"{c:>14.4f}" for c in cells))
    return "\n".join(lines) + "\n"


def _derived_seed(*keys: int) -> int:
    return int(np.random.SeedSequence(list(keys)).generate_state(1)[0])


def run_rcap_eval(
    cfg: ExperimentConfig,
    prepared: PreparedStack | None = None,
    proposals: dict[str, RegionalProposals] | None = None,
) -> dict[int, SelectionSummary]:
    """True-vs-corrupted label selection accuracy for kappa = 1..cfg.rcap.kappa.

    Per test image and repetition the true label is paired with a fresh
    corruption; slot order is randomized so the first-slot tie-break cannot
    inflate accuracy. frac_g1 counts true-label selections, frac_g2 corrupted
    ones; accuracy is correct/(correct+wrong) among decided images, averaged
    over repetitions.
    """
    cfg.validate()
    prepared = prepared or prepare(cfg)
    test_ids = sorted(prepared.split.test_ids)
    label_name = cfg.rcap_label or (cfg.train_label if cfg.train_label in ("G1", "G2") else "G1")

    if proposals is None:
        model, _ = fit_model(cfg, prepared)
        proposals = {i: predict_proposals(cfg, model, prepared, i) for i in test_ids}

    noisy_dir = None
    if cfg.dump_noisy:
        noisy_dir = _ensure_out(cfg) / "noisy"
        noisy_dir.mkdir(exist_ok=True)

    results: dict[int, SelectionSummary] = {}
    for kappa in range(1, cfg.rcap.kappa + 1):
        rep_accuracies = []
        n_true = n_noisy = n_manual = 0
        for rep in range(cfg.repetitions):
            correct = wrong = manual = 0
            for idx, image_id in enumerate(test_ids):
                true_mask = prepared.labels[image_id][label_name]
                noise_cfg = RcapConfig(
                    w=cfg.rcap.w,
                    kappa=kappa,
                    rng_seed=_derived_seed(cfg.rng_seed, 1, kappa, rep, idx),
                    offset_paste=cfg.rcap.offset_paste,
                )
                noisy = rcap(true_mask, noise_cfg)
                if noisy_dir is not None:
                    save_mask_png(
                        noisy, noisy_dir / f"{image_id}.{label_name}.noisy.k{kappa}.r{rep}.png"
                    )
                slot_rng = np.random.default_rng([cfg.rng_seed, 2, kappa, rep, idx])
                true_first = bool(slot_rng.integers(0, 2))
                t1, t2 = (true_mask, noisy) if true_first else (noisy, true_mask)
                decision = tlsa(proposals[image_id], t1, t2, prepared.planes[image_id].base, cfg.tlsa)
                if decision.tau == TAU_MANUAL:
                    manual += 1
                elif (decision.tau == TAU_G1) == true_first:
                    correct += 1
                else:
                    wrong += 1
            n_true += correct
            n_noisy += wrong
            n_manual += manual
            if correct + wrong:
                rep_accuracies.append(correct / (correct + wrong))
        total = n_true + n_noisy + n_manual
        mean_acc = float(np.mean(rep_accuracies)) if rep_accuracies else None
        std_acc = float(np.std(rep_accuracies)) if rep_accuracies else None
        results[kappa] = SelectionSummary(
            frac_g1=n_true / total,
            frac_g2=n_noisy / total,
            frac_manual=n_manual / total,
            mean_accuracy=mean_acc,
            std_accuracy=std_acc,
        )

    out_dir = _ensure_out(cfg)
    payload = {
        "experiment": "rcap_eval",
        "label": label_name,
        "repetitions": cfg.repetitions,
        "window": cfg.rcap.w,
        "per_kappa": {str(k): s.as_dict() for k, s in results.items()},
    }
    _write_json(out_dir / "metrics.json", payload)
    (out_dir / "tables.txt").write_text(format_rcap_table(results, label_name))
    _write_manifest(cfg, "eval-rcap", prepared)
    if cfg.figures:
        from . import report

        report.render_rcap_trend(results, out_dir / "rcap_accuracy.png")
    return results


def format_rcap_table(results: dict[int, SelectionSummary], label_name: str) -> str:
    lines = [f"label-vs-corrupted selection ({label_name})"]
    lines.append(f"{'kappa':<6}{'accuracy':>10}{'std':>8}{'true':>8}{'noisy':>8}{'manual':>8}")
    for kappa in sorted(results):
        s = results[kappa]
        acc = f"{s.mean_accuracy:.4f}" if s.mean_accuracy is not None else "n/a"
        std = f"{s.std_accuracy:.4f}" if s.std_accuracy is not None else "n/a"
        lines.append(
            f"{kappa:<6}{acc:>10}{std:>8}{s.frac_g1:>8.3f}{s.frac_g2:>8.3f}{s.frac_manual:>8.3f}"
        )
    return "\n".join(lines) + "\n"


def run_selection(
    cfg: ExperimentConfig,
    prepared: PreparedStack | None = None,
    proposals: dict[str, RegionalProposals] | None = None,
) -> SelectionSummary:
    """Select the better of G1/G2 per test image; write decisions and queue files."""
    cfg.validate()
    prepared = prepared or prepare(cfg)
    test_ids = sorted(prepared.split.test_ids)

    source = "external"
    if proposals is None:
        model, source = fit_model(cfg, prepared)
        proposals = {i: predict_proposals(cfg, model, prepared, i) for i in test_ids}

    out_dir = _ensure_out(cfg)
    rps_dir = out_dir / "rps"
    rps_dir.mkdir(exist_ok=True)

    counts = {TAU_G1: 0, TAU_G2: 0, TAU_MANUAL: 0}
    records = []
    manual_ids = []
    for image_id in test_ids:
        labels = prepared.labels[image_id]
        decision = tlsa(
            proposals[image_id], labels["G1"], labels["G2"], prepared.planes[image_id].base, cfg.tlsa
        )
        counts[decision.tau] += 1
        if decision.tau == TAU_MANUAL:
            manual_ids.append(image_id)
        records.append(decision.as_record(image_id, source))
        for prop_name, mask in zip(PROPOSAL_NAMES, proposals[image_id].as_tuple()):
            save_mask_png(mask, rps_dir / f"{image_id}.{prop_name}.png")

    with open(out_dir / "decisions.jsonl", "w") as fh:
        for record in records:
            fh.write(json.dumps(jsonable(record), sort_keys=True) + "\n")

    total = len(test_ids)
    summary = SelectionSummary(
        frac_g1=counts[TAU_G1] / total,
        frac_g2=counts[TAU_G2] / total,
        frac_manual=counts[TAU_MANUAL] / total,
    )
    _write_json(
        out_dir / "queue.json",
        {
            "stack_dir": str(cfg.stack_dir),
            "rps_dir": str(rps_dir),
            "decisions": str(out_dir / "decisions.jsonl"),
            "manual_ids": manual_ids,
        },
    )
    _write_json(
        out_dir / "metrics.json",
        {"experiment": "selection", "model_source": source, "n": total, "summary": summary.as_dict()},
    )
    (out_dir / "tables.txt").write_text(format_selection_table(summary, source))
    _write_manifest(cfg, "select", prepared)
    if cfg.figures:
        from . import report

        report.render_selection_summary(summary, out_dir / "selection_fractions.png")
    return summary


def format_selection_table(summary: SelectionSummary, source: str) -> str:
    return (
        f"target-label selection ({source})\n"
        f"{'choice':<8}{'fraction':>10}\n"
        f"{'G1':<8}{summary.frac_g1:>10.4f}\n"
        f"{'G2':<8}{summary.frac_g2:>10.4f}\n"
        f"{'Manual':<8}{summary.frac_manual:>10.4f}\n"
    )


def _ensure_out(cfg: ExperimentConfig) -> Path:
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(jsonable(payload), indent=2, sort_keys=True) + "\n")


def _write_manifest(cfg: ExperimentConfig, command: str, prepared: PreparedStack) -> None:
    manifest = {
        "command": command,
        "stack_dir": str(cfg.stack_dir),
        "model": cfg.model,
        "train_label": cfg.train_label,
        "rng_seed": cfg.rng_seed,
        "dropped_unannotated_ids": prepared.dropped_ids,
        "train_ids": prepared.split.train_ids,
        "workers": 1,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    _write_json(Path(cfg.out_dir) / "run_manifest.json", manifest)


def parse_config_file(path: str | Path) -> dict[str, str]:
    """Parse a plain-text key=value config file; '#' starts a comment line."""
    values = {}
    for raw_line in Path(path).read_text().splitlines():
        line = raw_line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"bad config line (expected key=value): {raw_line!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def config_from_mapping(values: dict[str, str]) -> ExperimentConfig:
    """Build an ExperimentConfig from string key=value pairs."""
    cfg = ExperimentConfig(stack_dir=values.get("stack_dir", ""), out_dir=values.get("out_dir", "out"))
    scalars = {
        "model": str,
        "train_label": str,
        "rcap_label": str,
        "external_rps_dir": str,
        "repetitions": int,
        "rng_seed": int,
        "baseline_reps": int,
        "struct_diameter": int,
        "esn_m": int,
        "esn_w_m": int,
    }
    for key, cast in scalars.items():
        if key in values:
            setattr(cfg, key, cast(values[key]))
    if "figures" in values:
        cfg.figures = values["figures"].lower() in ("1", "true", "yes")
    if "dump_noisy" in values:
        cfg.dump_noisy = values["dump_noisy"].lower() in ("1", "true", "yes")
    tlsa_kwargs = {}
    for key, cast in (("delta1", float), ("delta2", float), ("delta3", float), ("tlsa_w", int)):
        if key in values:
            tlsa_kwargs[key.removeprefix("tlsa_")] = cast(values[key])
    if tlsa_kwargs:
        cfg.tlsa = replace(cfg.tlsa, **tlsa_kwargs)
    rcap_kwargs = {}
    for key, cast in (("rcap_w", int), ("kappa", int), ("offset_paste", lambda v: v.lower() in ("1", "true", "yes"))):
        if key in values:
            rcap_kwargs[{"rcap_w": "w"}.get(key, key)] = cast(values[key])
    if rcap_kwargs:
        cfg.rcap = replace(cfg.rcap, **rcap_kwargs)
    return cfg
