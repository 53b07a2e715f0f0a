"""Multi-stage recipe orchestration, manifests, and report tables.

A recipe is a JSON-serializable config: model + data settings plus an
ordered stage list. Two orderings are enforced (a full fine-tune must
precede pruning; quantization must precede QLoRA fine-tuning); everything
else is the caller's business. Stage artifacts are immutable files under
the recipe's output directory; rerunning a recipe skips stages whose
fingerprint and artifact both match, unless forced.

The teacher for quality retention is always the first full fine-tune's
output. Reports show, per stage, metric scores, the logical parameter
count, and packed storage bytes in decimal GB; packing nf4 weights halves
bytes but removes no parameters, so those two columns move independently.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

from .checkpoint import load_model, save_model
from .data import (
    ParallelCorpus,
    Segment,
    gen_corpus,
    gen_ood_corpus,
    load_jsonl,
    make_task,
    save_jsonl,
    tokens_to_text,
    train_test_split,
)
from .distill import augment, generate_kd, oversample
from .errors import ConfigError, StageFailure
from .lora import LoraConfig, qlora_finetune
from .metrics import ScorerConfig, make_scorer, score_report
from .model import (
    ModelConfig,
    TrainConfig,
    TransformerModel,
    build,
    greedy_decode,
    train_full,
)
from .numerics import Rng
from .pruning import (
    PruningStrategy,
    prune_iteratively,
    prune_middle,
    prune_with_recovery,
)
from .quant import quantize_model, storage_bytes

STAGE_KINDS = (
    "train_full", "prune", "finetune", "distill_augment",
    "quantize", "qlora_finetune", "evaluate",
)

# Desk-scale defaults: small enough to train in minutes, deep enough that
# pruning 2 of 8 decoder layers mirrors the 8-of-32 setting proportionally.
DESK_MODEL = {
    "vocab_size": 24, "d_model": 32, "n_heads": 4, "d_ff": 64,
    "encoder_layers": 2, "decoder_layers": 8, "max_positions": 24,
    "dropout": 0.0,
}
DESK_DATA = {
    "vocab_size": 24, "n": 400, "reorder_window": 2,
    "min_len": 4, "max_len": 7, "test_size": 20, "dev_size": 16,
}
DESK_TRAIN = {"epochs": 12, "batch_size": 8, "learning_rate": 3e-3,
              "weight_decay": 0.1}
DESK_FINETUNE = {"epochs": 4, "batch_size": 8, "learning_rate": 3e-3,
                 "weight_decay": 0.1}
DESK_QLORA = {"rank": 4, "alpha": 8.0, "epochs": 1, "batch_size": 8,
              "learning_rate": 1e-3, "weight_decay": 0.0}


@dataclass
class RecipeConfig:
    name: str
    out_dir: str
    seed: int = 0
    model: dict = field(default_factory=lambda: dict(DESK_MODEL))
    data: dict = field(default_factory=lambda: dict(DESK_DATA))
    report_metrics: list[str] = field(default_factory=lambda: ["bleu", "chrf++"])
    selection_metric: str = "chrf++"
    decode_max_len: int = 1024
    stages: list[dict] = field(default_factory=list)

    def __post_init__(self):
        for i, stage in enumerate(self.stages):
            kind = stage.get("kind")
            if kind not in STAGE_KINDS:
                raise ConfigError(f"stage {i}: unknown kind '{kind}'")
        self._check_order()

    def _check_order(self):
        kinds = [s["kind"] for s in self.stages]
        for i, kind in enumerate(kinds):
            if kind == "prune" and "train_full" not in kinds[:i]:
                raise ConfigError(
                    f"stage {i} 'prune' requires an earlier 'train_full' stage"
                )
            if kind == "qlora_finetune" and "quantize" not in kinds[:i]:
                raise ConfigError(
                    f"stage {i} 'qlora_finetune' requires an earlier 'quantize' stage"
                )

    def to_dict(self) -> dict:
        return {
            "name": self.name, "out_dir": self.out_dir, "seed": self.seed,
            "model": self.model, "data": self.data,
            "report_metrics": self.report_metrics,
            "selection_metric": self.selection_metric,
            "decode_max_len": self.decode_max_len, "stages": self.stages,
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "RecipeConfig":
        return cls(**payload)

    @classmethod
    def from_json(cls, path) -> "RecipeConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    def fingerprint(self) -> str:
        payload = self.to_dict()
        payload.pop("out_dir")  # relocatable runs keep their identity
        blob = json.dumps(payload, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def setup1_recipe(name: str = "setup1", out_dir: str = "runs/setup1",
                  seed: int = 0, **overrides) -> RecipeConfig:
    """Full fine-tune, then KD-augmented QLoRA over the 4-bit model."""
    stages = [
        {"kind": "train_full", **DESK_TRAIN},
        {"kind": "distill_augment", "oversample": 1, "ood_n": 0},
        {"kind": "quantize", "block_size": 64, "double_quant": True},
        {"kind": "qlora_finetune", **DESK_QLORA, "epochs": 4},
        {"kind": "evaluate", "split": "test"},
    ]
    return RecipeConfig(name=name, out_dir=out_dir, seed=seed, stages=stages,
                        **overrides)


def setup2_recipe(name: str = "setup2", out_dir: str = "runs/setup2",
                  seed: int = 0, prune_layers: int = 2,
                  ood_n: int = 100, **overrides) -> RecipeConfig:
    """Fine-tune, iteratively prune the decoder, recover, distill with
    oversampling and out-of-domain data, quantize, QLoRA fine-tune."""
    stages = [
        {"kind": "train_full", **DESK_TRAIN},
        {"kind": "prune", "strategy": "iterative", "layers": prune_layers,
         "pool": "decoder_only"},
        {"kind": "finetune", **DESK_FINETUNE},
        {"kind": "distill_augment", "oversample": 10, "ood_n": ood_n},
        {"kind": "quantize", "block_size": 64, "double_quant": True},
        {"kind": "qlora_finetune", **DESK_QLORA, "epochs": 1},
        {"kind": "evaluate", "split": "test"},
    ]
    return RecipeConfig(name=name, out_dir=out_dir, seed=seed, stages=stages,
                        **overrides)


@dataclass
class StageRecord:
    index: int
    kind: str
    params: dict
    fingerprint: str
    status: str = "pending"
    cached: bool = False
    wall_clock_s: float = 0.0
    checkpoint: str | None = None
    corpus_file: str | None = None
    param_count: int | None = None
    adapter_params: int | None = None
    storage: dict | None = None
    metrics: dict | None = None
    details: dict = field(default_factory=dict)
    error: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ExperimentManifest:
    name: str
    recipe_fingerprint: str
    seed: int
    stages: list[StageRecord] = field(default_factory=list)
    teacher_checkpoint: str | None = None
    teacher_metrics: dict | None = None
    retention: dict | None = None
    status: str = "ok"

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "recipe_fingerprint": self.recipe_fingerprint,
            "seed": self.seed,
            "stages": [s.to_dict() for s in self.stages],
            "teacher_checkpoint": self.teacher_checkpoint,
            "teacher_metrics": self.teacher_metrics,
            "retention": self.retention,
            "status": self.status,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> dict:
        return json.loads(Path(path).read_text())


def quality_retention(student_report: dict, teacher_report: dict) -> dict:
    """Per-metric student/teacher corpus-score ratio; a zero-scoring teacher
    makes the ratio undefined and is reported as such, never as infinity."""
    retention: dict = {}
    for metric, student_score in student_report.items():
        teacher_score = teacher_report.get(metric)
        if teacher_score is None:
            continue
        if teacher_score == 0:
            retention[metric] = "undefined"
        else:
            retention[metric] = max(0.0, student_score / teacher_score)
    return retention


class _RecipeRun:
    def __init__(self, config: RecipeConfig, force: bool):
        self.config = config
        self.force = force
        self.out_dir = Path(config.out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.rng = Rng(config.seed)
        self.model: TransformerModel | None = None
        self.task = None
        self.corpus: ParallelCorpus | None = None
        self.train_corpus: ParallelCorpus | None = None  # set by distill_augment
        self.previous = self._load_previous_stages()

    def _load_previous_stages(self) -> dict[str, dict]:
        path = self.out_dir / "manifest.json"
        if self.force or not path.exists():
            return {}
        try:
            manifest = json.loads(path.read_text())
        except json.JSONDecodeError:
            return {}
        return {s["fingerprint"]: s for s in manifest.get("stages", [])
                if s.get("status") == "ok"}

    # -- data ---------------------------------------------------------------

    def prepare_data(self) -> None:
        data = dict(DESK_DATA)
        data.update(self.config.data)
        seed = data.get("seed", self.config.seed)
        self.task = make_task(
            vocab_size=data["vocab_size"],
            reorder_window=data["reorder_window"],
            min_len=data["min_len"], max_len=data["max_len"], seed=seed,
        )
        corpus = gen_corpus(self.task, data["n"], seed=seed)
        self.corpus = train_test_split(
            corpus, test_size=data["test_size"], seed=seed,
            dev_size=data["dev_size"],
        )
        save_jsonl(self.corpus, self.out_dir / "corpus.jsonl")

    # -- evaluation helpers ---------------------------------------------------

    def _decode(self, model: TransformerModel, segments: Sequence[Segment]) -> list[str]:
        return [
            tokens_to_text(greedy_decode(model, seg.source,
                                         max_len=self.config.decode_max_len))
            for seg in segments
        ]

    def _scorers(self) -> list[ScorerConfig]:
        return [make_scorer(kind) for kind in self.config.report_metrics]

    def evaluate_model(self, model: TransformerModel, split: str) -> dict:
        segments = self.corpus.split(split)
        hypotheses = self._decode(model, segments)
        references = [tokens_to_text(seg.target) for seg in segments]
        return {
            cfg.name: score_report(cfg, hypotheses, references).corpus_score
            for cfg in self._scorers()
        }

    # -- stages ----------------------------------------------------------------

    def run_stage(self, record: StageRecord) -> None:
        kind = record.kind
        params = record.params
        stage_rng = self.rng.split(f"stage-{record.index}-{kind}")

        if kind in ("train_full", "finetune"):
            cfg = TrainConfig(
                epochs=params.get("epochs", DESK_TRAIN["epochs"]),
                batch_size=params.get("batch_size", DESK_TRAIN["batch_size"]),
                learning_rate=params.get("learning_rate", DESK_TRAIN["learning_rate"]),
                weight_decay=params.get("weight_decay", DESK_TRAIN["weight_decay"]),
            )
            _, curve = train_full(self.model, self.corpus, cfg, stage_rng)
            record.details["final_loss"] = curve[-1] if curve else None
        elif kind == "prune":
            strategy = PruningStrategy(
                kind={"iterative": "iterative", "middle": "middle",
                      "recovery": "iterative_recovery"}[params.get("strategy", "iterative")],
                target_removals=params.get("layers", 2),
                pool=params.get("pool", "decoder_only"),
                selection_metric=make_scorer(params.get("metric", self.config.selection_metric)),
                eval_split=params.get("eval_split", "dev"),
            )
            devset = self.corpus.split(strategy.eval_split)
            if strategy.kind == "iterative":
                self.model, plan = prune_iteratively(
                    self.model, strategy, devset, max_len=self.config.decode_max_len)
            elif strategy.kind == "middle":
                self.model, plan = prune_middle(self.model, strategy)
            else:
                recover_cfg = TrainConfig(**{**DESK_FINETUNE,
                                             **params.get("recovery_train", {})})
                self.model, plan = prune_with_recovery(
                    self.model, strategy, devset, recover_cfg, self.corpus,
                    stage_rng, max_len=self.config.decode_max_len)
            plan_path = self.out_dir / f"stage{record.index:02d}_plan.json"
            plan.save(plan_path)
            record.details["plan"] = plan.to_dict()
            record.details["plan_file"] = str(plan_path)
        elif kind == "distill_augment":
            teacher = load_model(self.teacher_checkpoint_path())
            train_segments = self.corpus.split("train")
            kd = generate_kd(teacher, [s.source for s in train_segments],
                             max_len=self.config.decode_max_len)
            augmented = augment(train_segments, kd,
                                dedup_on=params.get("dedup_on", "pair"))
            record.details["authentic"] = len(train_segments)
            record.details["distilled"] = len(kd)
            record.details["augmented"] = len(augmented)
            factor = params.get("oversample", 1)
            mixed = oversample(augmented, {"authentic", "distilled"}, factor) \
                if factor > 1 else augmented
            ood_n = params.get("ood_n", 0)
            if ood_n:
                ood = gen_ood_corpus(
                    self.task, ood_n,
                    seed=params.get("ood_seed", self.config.seed + 1),
                    vocab_overlap=params.get("ood_vocab_overlap", 0.5),
                )
                segments = mixed.segments + ood.segments
            else:
                segments = list(mixed.segments)
            order = stage_rng.split("shuffle").permutation(len(segments))
            shuffled = ParallelCorpus([segments[i] for i in order])
            corpus_path = self.out_dir / f"stage{record.index:02d}_train_corpus.jsonl"
            save_jsonl(shuffled, corpus_path)
            record.corpus_file = str(corpus_path)
            record.details["mixed_size"] = len(shuffled)
            self.train_corpus = shuffled
        elif kind == "quantize":
            quantize_model(self.model,
                           block_size=params.get("block_size", 64),
                           double_quant=params.get("double_quant", True))
        elif kind == "qlora_finetune":
            lora_cfg = LoraConfig(
                rank=params.get("rank", DESK_QLORA["rank"]),
                alpha=params.get("alpha", DESK_QLORA["alpha"]),
                dropout=params.get("dropout", 0.0),
                rs_lora=params.get("rs_lora", True),
            )
            train_cfg = TrainConfig(
                epochs=params.get("epochs", DESK_QLORA["epochs"]),
                batch_size=params.get("batch_size", DESK_QLORA["batch_size"]),
                learning_rate=params.get("learning_rate", DESK_QLORA["learning_rate"]),
                weight_decay=params.get("weight_decay", DESK_QLORA["weight_decay"]),
            )
            corpus = self.train_corpus if self.train_corpus is not None else self.corpus
            _, curve = qlora_finetune(self.model, corpus, lora_cfg, train_cfg, stage_rng)
            record.details["final_loss"] = curve[-1] if curve else None
        elif kind == "evaluate":
            split = params.get("split", "test")
            record.metrics = self.evaluate_model(self.model, split)
            record.details["split"] = split
        else:
            raise ConfigError(f"unknown stage kind '{kind}'")

    def teacher_checkpoint_path(self) -> Path:
        for i, stage in enumerate(self.config.stages):
            if stage["kind"] == "train_full":
                return self.out_dir / f"stage{i:02d}_train_full.pkpt"
        raise ConfigError("recipe has no train_full stage to act as teacher")


def run_recipe(config: RecipeConfig, force: bool = False) -> ExperimentManifest:
    """Execute stages in order, persisting one checkpoint and record per
    stage. A stage failure marks the manifest failed and halts the run."""
    run = _RecipeRun(config, force)
    manifest = ExperimentManifest(
        name=config.name, recipe_fingerprint=config.fingerprint(),
        seed=config.seed,
    )
    config.save(run.out_dir / "recipe.json")
    run.prepare_data()

    chain = config.fingerprint()
    model_stage_kinds = {"train_full", "prune", "finetune", "quantize", "qlora_finetune"}
    try:
        run.model = build(ModelConfig(**{**DESK_MODEL, **config.model}),
                          run.rng.split("init"))
    except Exception as exc:
        raise ConfigError(f"invalid model config: {exc}") from exc

    for index, stage in enumerate(config.stages):
        kind = stage["kind"]
        params = {k: v for k, v in stage.items() if k != "kind"}
        chain = hashlib.sha256(
            f"{chain}|{index}|{json.dumps(stage, sort_keys=True)}".encode()
        ).hexdigest()[:16]
        record = StageRecord(index=index, kind=kind, params=params,
                             fingerprint=chain)
        manifest.stages.append(record)
        checkpoint_path = run.out_dir / f"stage{index:02d}_{kind}.pkpt"

        cached = run.previous.get(chain)
        started = time.perf_counter()
        try:
            if cached and _artifacts_present(cached):
                _restore_cached_stage(run, record, cached)
            else:
                run.run_stage(record)
                if kind in model_stage_kinds:
                    save_model(run.model, checkpoint_path,
                               stage=kind, seed=config.seed,
                               pruning_plan=record.details.get("plan_file"))
                    record.checkpoint = str(checkpoint_path)
            record.status = "ok"
        except Exception as exc:
            record.status = "failed"
            record.error = f"{type(exc).__name__}: {exc}"
            manifest.status = "failed"
            record.wall_clock_s = time.perf_counter() - started
            manifest.save(run.out_dir / "manifest.json")
            raise StageFailure(
                f"stage {index} ({kind}) failed: {exc}"
            ) from exc
        record.wall_clock_s = time.perf_counter() - started

        if kind in model_stage_kinds:
            record.param_count = run.model.param_count()
            record.adapter_params = run.model.adapter_param_count()
            record.storage = storage_bytes(run.model).to_dict()
        if kind == "train_full" and manifest.teacher_checkpoint is None:
            manifest.teacher_checkpoint = str(checkpoint_path)
        if kind == "evaluate":
            if manifest.teacher_checkpoint is not None and manifest.teacher_metrics is None:
                teacher = load_model(manifest.teacher_checkpoint)
                manifest.teacher_metrics = run.evaluate_model(
                    teacher, record.details.get("split", "test"))
            if manifest.teacher_metrics is not None and record.metrics is not None:
                manifest.retention = quality_retention(
                    record.metrics, manifest.teacher_metrics)

    manifest.save(run.out_dir / "manifest.json")
    return manifest


def _artifacts_present(cached: dict) -> bool:
    for key in ("checkpoint", "corpus_file"):
        path = cached.get(key)
        if path and not Path(path).exists():
            return False
    return True


def _restore_cached_stage(run: _RecipeRun, record: StageRecord, cached: dict) -> None:
    record.cached = True
    record.checkpoint = cached.get("checkpoint")
    record.corpus_file = cached.get("corpus_file")
    record.metrics = cached.get("metrics")
    record.details = cached.get("details", {})
    if record.checkpoint:
        run.model = load_model(record.checkpoint)
    if record.corpus_file:
        run.train_corpus = load_jsonl(record.corpus_file)


def run_ood_size_sweep(base: RecipeConfig, sizes: Sequence[int],
                       force: bool = False) -> list[tuple[int, ExperimentManifest]]:
    """Rerun a recipe with varying out-of-domain corpus sizes (the 10k/50k/
    80k/100k sweep analog). The base recipe must contain a distill_augment
    stage; each variant runs in its own subdirectory."""
    if not any(s["kind"] == "distill_augment" for s in base.stages):
        raise ConfigError("ood sweep needs a distill_augment stage in the recipe")
    results = []
    for size in sizes:
        payload = base.to_dict()
        payload["name"] = f"{base.name}-ood{size}"
        payload["out_dir"] = str(Path(base.out_dir) / f"ood{size}")
        for stage in payload["stages"]:
            if stage["kind"] == "distill_augment":
                stage["ood_n"] = int(size)
        results.append((int(size), run_recipe(RecipeConfig.from_dict(payload),
                                              force=force)))
    return results


# -- reporting ---------------------------------------------------------------

def _fmt_score(value) -> str:
    return f"{value:.2f}" if isinstance(value, (int, float)) else "-"


def render_report(manifest: ExperimentManifest | dict) -> tuple[str, dict]:
    """Text table plus a JSON payload carrying the same (display-rounded)
    numbers. Storage uses decimal GB (1 GB = 1000^3 bytes); the params
    column is the logical count, which packing does not change."""
    data = manifest.to_dict() if isinstance(manifest, ExperimentManifest) else manifest
    metric_names: list[str] = []
    for stage in data["stages"]:
        for name in (stage.get("metrics") or {}):
            if name not in metric_names:
                metric_names.append(name)

    rows = []
    for stage in data["stages"]:
        storage = stage.get("storage") or {}
        row = {
            "stage": f"{stage['index']:02d} {stage['kind']}",
            "status": stage["status"],
            "params": stage.get("param_count"),
            "adapter_params": stage.get("adapter_params"),
            "storage_bytes": storage.get("total_bytes"),
            "storage_gb": round(storage["total_bytes"] / 1000**3, 9)
            if storage.get("total_bytes") is not None else None,
            "wall_clock_s": round(stage.get("wall_clock_s", 0.0), 2),
        }
        for name in metric_names:
            value = (stage.get("metrics") or {}).get(name)
            row[name] = round(value, 2) if value is not None else None
        rows.append(row)

    retention = {}
    for name, value in (data.get("retention") or {}).items():
        retention[name] = value if isinstance(value, str) else round(value, 4)
    teacher = {}
    for name, value in (data.get("teacher_metrics") or {}).items():
        teacher[name] = round(value, 2)

    payload = {
        "name": data["name"],
        "recipe_fingerprint": data["recipe_fingerprint"],
        "status": data["status"],
        "rows": rows,
        "teacher_metrics": teacher,
        "retention": retention,
        "notes": [
            "storage is decimal: 1 GB = 1000^3 bytes",
            "params are logical counts; nf4 packing halves bytes, not parameters",
        ],
    }

    headers = ["stage", "status", "params", "storage_bytes", "storage_gb",
               *metric_names, "wall_clock_s"]
    lines = []
    widths = {}
    table_rows = []
    for row in rows:
        cells = []
        for column in headers:
            value = row.get(column)
            if column == "storage_gb" and value is not None:
                cells.append(f"{value:.9f}")
            elif column in metric_names:
                cells.append(_fmt_score(value))
            else:
                cells.append("-" if value is None else str(value))
        table_rows.append(cells)
    for i, column in enumerate(headers):
        widths[i] = max(len(column), *(len(r[i]) for r in table_rows)) if table_rows else len(column)
    lines.append(f"recipe {data['name']}  [{data['recipe_fingerprint']}]  status={data['status']}")
    lines.append("  ".join(h.ljust(widths[i]) for i, h in enumerate(headers)))
    for cells in table_rows:
        lines.append("  ".join(c.ljust(widths[i]) for i, c in enumerate(cells)))
    if teacher:
        lines.append("teacher: " + ", ".join(f"{k}={v:.2f}" for k, v in teacher.items()))
    if retention:
        parts = []
        for k, v in retention.items():
            parts.append(f"{k}={v}" if isinstance(v, str) else f"{k}={v:.4f}")
        lines.append("retention vs teacher: " + ", ".join(parts))
    for note in payload["notes"]:
        lines.append(f"note: {note}")
    return "\n".join(lines) + "\n", payload
