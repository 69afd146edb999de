"""End-to-end assessment: PCI regression and captioning on the same image.

Configuration is one JSON document. Relative paths inside it resolve
against the directory holding the config file.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .annotations import AnnotationRecord, load_annotations, pci_class, render_caption
from .autodiff.io import load_ften
from .captioner import (
    RESERVED,
    CaptionerConfig,
    CaptionerModel,
    CaptionerTrainConfig,
    ToyBackbone,
    caption_features,
    train_captioner,
    write_attention_csv,
)
from .pci_net import (
    DetectionLossWeights,
    PciModel,
    PciTrainConfig,
    build_mask,
    concat_input,
    oracle_backends,
    train_pci,
)
from .regression_metrics import PairedSeries, error_analysis, write_regression_reports
from .text_metrics import MetricReport, score_caption, tokenize


class ConfigError(ValueError):
    """The pipeline config file is missing, malformed or inconsistent."""


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DataConfig:
    annotations: str = ""
    images_dir: str = ""
    features_dir: str | None = None  # precomputed features override the backbone


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 32
    n_heads: int = 2
    n_layers: int = 1
    pooled_h: int = 4
    pooled_w: int = 4
    ffn_hidden: int = 64
    t_max: int = 40
    conv_kernel: int = 3

    def __post_init__(self) -> None:
        # vocabulary and feature sizes are placeholders; only the hyperparameters are checked
        CaptionerConfig(feature_channels=1, vocab_size=len(RESERVED), **dataclasses.asdict(self))


@dataclass(frozen=True)
class PciModelSection:
    channels: tuple[int, ...] = (8, 8, 8, 8)
    kernel_size: int = 3
    output_bias: float = 50.0


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 500
    lr: float = 3e-3
    lambda_dsa: float = 1.0
    lr_schedule: str = "cosine"
    min_freq: int = 1
    pci_epochs: int = 2000
    pci_lr: float = 3e-4
    lambda_weights: DetectionLossWeights = DetectionLossWeights()


@dataclass(frozen=True)
class BackboneConfig:
    seed: int = 1234
    channels: tuple[int, ...] = (8, 8)


@dataclass(frozen=True)
class ReportConfig:
    dir: str = "reports"


@dataclass(frozen=True)
class MetricsConfig:
    bleu_max_n: int = 4
    gleu_lo: int = 1
    gleu_hi: int = 4


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    data: DataConfig = DataConfig()
    model: ModelConfig = ModelConfig()
    pci_model: PciModelSection = PciModelSection()
    train: TrainConfig = TrainConfig()
    backbone: BackboneConfig = BackboneConfig()
    checkpoint_dir: str = "checkpoints"
    report: ReportConfig = ReportConfig()
    metrics: MetricsConfig = MetricsConfig()
    base_dir: str = field(default=".", compare=False)

    @classmethod
    def from_dict(cls, raw: dict[str, Any], base_dir: str | Path = ".") -> "PipelineConfig":
        if "seed" not in raw:
            raise ConfigError("config: missing required key 'seed'")
        config = _build(cls, {k: v for k, v in raw.items() if k != "base_dir"}, "config")
        return dataclasses.replace(config, base_dir=str(base_dir))

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a JSON object")
        return cls.from_dict(raw, path.parent)

    def to_dict(self) -> dict[str, Any]:
        out = dataclasses.asdict(self)
        out.pop("base_dir")
        return out

    def with_seed(self, seed: int) -> "PipelineConfig":
        return dataclasses.replace(self, seed=int(seed))

    def path(self, value: str | None, what: str) -> Path:
        if not value:
            raise ConfigError(f"config: {what} is not set")
        p = Path(value)
        return p if p.is_absolute() else Path(self.base_dir) / p

    @property
    def report_dir(self) -> Path:
        return self.path(self.report.dir, "report.dir")

    @property
    def pci_checkpoint(self) -> Path:
        return self.path(self.checkpoint_dir, "checkpoint_dir") / "pci"

    @property
    def captioner_checkpoint(self) -> Path:
        return self.path(self.checkpoint_dir, "checkpoint_dir") / "captioner"

    def captioner_train_config(self) -> CaptionerTrainConfig:
        return CaptionerTrainConfig(
            epochs=self.train.epochs,
            lr=self.train.lr,
            lr_schedule=self.train.lr_schedule,
            seed=self.seed,
            min_freq=self.train.min_freq,
            lambda_dsa=self.train.lambda_dsa,
            **dataclasses.asdict(self.model),
        )

    def pci_train_config(self) -> PciTrainConfig:
        return PciTrainConfig(
            epochs=self.train.pci_epochs,
            lr=self.train.pci_lr,
            lr_schedule=self.train.lr_schedule,
            seed=self.seed,
            channels=self.pci_model.channels,
            kernel_size=self.pci_model.kernel_size,
            output_bias=self.pci_model.output_bias,
        )

    def make_backbone(self) -> ToyBackbone:
        return ToyBackbone(channels=self.backbone.channels, seed=self.backbone.seed)


def _build(cls, raw: Any, where: str):
    """Instantiate a (nested) frozen dataclass from JSON, rejecting unknown keys."""
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object, got {type(raw).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls) if f.name != "base_dir"}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    kwargs = {}
    for name, value in raw.items():
        default = fields[name].default
        if dataclasses.is_dataclass(default):
            kwargs[name] = _build(type(default), value, f"{where}.{name}")
        elif isinstance(default, tuple):
            if not isinstance(value, list):
                raise ConfigError(f"{where}.{name}: expected a list")
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


# ---------------------------------------------------------------------------
# Data access
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Sample:
    record: AnnotationRecord
    image: np.ndarray


def load_samples(config: PipelineConfig) -> list[Sample]:
    records = load_annotations(config.path(config.data.annotations, "data.annotations"))
    images_dir = config.path(config.data.images_dir, "data.images_dir")
    samples = []
    for record in records:
        image = load_ften(images_dir / f"{record.image_id}.ften")
        if image.ndim != 3 or image.shape[:2] != (record.height, record.width):
            raise ValueError(f"image {record.image_id!r}: shape {image.shape} does not match annotation {record.height}x{record.width}")
        samples.append(Sample(record, image))
    if not samples:
        raise ValueError(f"no records in {config.data.annotations}")
    return samples


def sample_features(config: PipelineConfig, sample: Sample, backbone: ToyBackbone | None = None) -> np.ndarray:
    if config.data.features_dir:
        return load_ften(config.path(config.data.features_dir, "data.features_dir") / f"{sample.record.image_id}.ften")
    return (backbone or config.make_backbone())(sample.image)


def reference_tokens(record: AnnotationRecord) -> list[str]:
    return render_caption(record.caption).split()


def pci_input(sample: Sample) -> np.ndarray:
    detector, segmenter = oracle_backends(sample.record)
    return concat_input(sample.image, build_mask(sample.image, detector, segmenter)).data


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def run_train_pci(config: PipelineConfig, samples: Sequence[Sample] | None = None) -> list[float]:
    samples = samples if samples is not None else load_samples(config)
    model, history = train_pci([(s.record, s.image) for s in samples], config.pci_train_config())
    model.save(config.pci_checkpoint)
    return history


def run_train_captioner(config: PipelineConfig, samples: Sequence[Sample] | None = None) -> list[float]:
    samples = samples if samples is not None else load_samples(config)
    backbone = config.make_backbone()
    dataset = [(sample_features(config, s, backbone), reference_tokens(s.record)) for s in samples]
    model, history = train_captioner(dataset, config.captioner_train_config())
    model.save(config.captioner_checkpoint)
    return history


# ---------------------------------------------------------------------------
# Inference
# ---------------------------------------------------------------------------


def display_pci(pci_hat: float) -> int:
    """Half-up rounding for the caption sentence."""
    return int(math.floor(pci_hat + 0.5))


def final_caption(pci_hat: float, caption_tokens: Sequence[str]) -> str:
    """Caption text followed by the PCI sentence with its condition class.

    The sentence shows the rounded PCI and the class of that rounded value,
    so the number and the class name never disagree within the text.
    """
    pci_hat = float(pci_hat)
    if not (0.0 <= pci_hat <= 100.0):
        raise ValueError(f"pci out of range [0, 100]: {pci_hat}")
    shown = display_pci(pci_hat)
    suffix = f"The PCI of the pavement is {shown} ( {pci_class(shown).label} ) ."
    body = " ".join(caption_tokens)
    return f"{body} {suffix}" if body else suffix


@dataclass(frozen=True)
class AssessmentReport:
    image_id: str
    predicted_pci: float
    pci_class: str
    caption_tokens: tuple[str, ...]
    final_caption: str
    truncated: bool

    def __post_init__(self) -> None:
        if not 0.0 <= self.predicted_pci <= 100.0:
            raise ValueError(f"predicted_pci out of range: {self.predicted_pci}")
        if self.pci_class != pci_class(self.predicted_pci).label:
            raise ValueError(f"pci_class {self.pci_class!r} inconsistent with {self.predicted_pci}")

    @property
    def empty_caption(self) -> bool:
        return not self.caption_tokens

    def to_json(self) -> str:
        row = dataclasses.asdict(self)
        row["caption_tokens"] = list(self.caption_tokens)
        row["empty_caption"] = self.empty_caption
        return json.dumps(row, sort_keys=True)


@dataclass
class LoadedModels:
    pci: PciModel
    captioner: CaptionerModel
    backbone: ToyBackbone

    @classmethod
    def load(cls, config: PipelineConfig) -> "LoadedModels":
        captioner = CaptionerModel.load(config.captioner_checkpoint)
        if captioner.vocab is None:
            raise ValueError(f"{config.captioner_checkpoint}: checkpoint carries no vocabulary")
        return cls(PciModel.load(config.pci_checkpoint), captioner, config.make_backbone())


def run_infer(config: PipelineConfig, sample: Sample, models: LoadedModels | None = None, attention_csv=None) -> AssessmentReport:
    models = models or LoadedModels.load(config)
    pci_hat = float(models.pci.predict(pci_input(sample)))
    features = sample_features(config, sample, models.backbone)
    result = caption_features(models.captioner, features)
    tokens = tuple(models.captioner.vocab.decode(result.tokens))
    if attention_csv is not None:
        write_attention_csv(result.maps, attention_csv)
    return AssessmentReport(
        image_id=sample.record.image_id,
        predicted_pci=pci_hat,
        pci_class=pci_class(pci_hat).label,
        caption_tokens=tokens,
        final_caption=final_caption(pci_hat, tokens),
        truncated=result.truncated,
    )


def write_assessments(reports: Sequence[AssessmentReport], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for report in reports:
            fh.write(report.to_json() + "\n")


def run_infer_all(config: PipelineConfig, samples: Sequence[Sample] | None = None, image_ids: Sequence[str] = ()) -> list[AssessmentReport]:
    """Infer every requested sample; writes assessments.jsonl and attention CSVs."""
    samples = samples if samples is not None else load_samples(config)
    if image_ids:
        wanted = set(image_ids)
        missing = wanted - {s.record.image_id for s in samples}
        if missing:
            raise ValueError(f"unknown image id(s): {', '.join(sorted(missing))}")
        samples = [s for s in samples if s.record.image_id in wanted]
    models = LoadedModels.load(config)
    out = config.report_dir
    (out / "attention").mkdir(parents=True, exist_ok=True)
    reports = [run_infer(config, s, models, out / "attention" / f"{s.record.image_id}.csv") for s in samples]
    write_assessments(reports, out / "assessments.jsonl")
    return reports


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------


@dataclass
class EvaluationResult:
    captions: MetricReport
    series: PairedSeries
    reports: list[AssessmentReport]


def evaluate_reports(config: PipelineConfig, samples: Sequence[Sample], reports: Sequence[AssessmentReport]) -> EvaluationResult:
    if not samples:
        raise ValueError("evaluation needs a non-empty dataset")
    m = config.metrics
    captions = MetricReport()
    for sample, report in zip(samples, reports):
        cand = tokenize(" ".join(report.caption_tokens))
        ref = tokenize(" ".join(reference_tokens(sample.record)))
        for name, score in score_caption(cand, ref, m.bleu_max_n, m.gleu_lo, m.gleu_hi).items():
            captions.add(sample.record.image_id, name, score)
    series = PairedSeries(tuple((r.image_id, r.predicted_pci, s.record.pci) for s, r in zip(samples, reports)))
    return EvaluationResult(captions, series, list(reports))


def run_evaluate(config: PipelineConfig, samples: Sequence[Sample] | None = None) -> EvaluationResult:
    """Infer the whole dataset and write every metric CSV plus assessments.jsonl."""
    samples = samples if samples is not None else load_samples(config)
    if not samples:
        raise ValueError("evaluation needs a non-empty dataset")
    models = LoadedModels.load(config)
    reports = [run_infer(config, s, models) for s in samples]
    result = evaluate_reports(config, samples, reports)
    out = config.report_dir
    out.mkdir(parents=True, exist_ok=True)
    result.captions.write_csv(out / "caption_metrics.csv", out / "caption_summary.csv")
    write_regression_reports(result.series, error_analysis(result.series), out)
    write_assessments(reports, out / "assessments.jsonl")
    return result

