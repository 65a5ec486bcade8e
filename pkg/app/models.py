from typing import Literal, Union

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

CLASS_NAMES = ("Arborio", "Basmati", "Ipsala", "Jasmine", "Karacadag")
SPLITS = ("train", "val", "test")


class CannyConfig(BaseModel):
    low: float = 50.0
    high: float = 150.0
    sigma: float = Field(1.4, gt=0)

    @model_validator(mode="after")
    def check_thresholds(self):
        if not self.low < self.high:
            raise ValueError("canny low threshold must be below the high threshold")
        return self


class TrainingConfig(BaseModel):
    batch_size: int = Field(32, ge=1)
    image_size: int = Field(50, ge=1)
    channels: int = Field(3, ge=1)
    optimizer: Literal["adamax", "adam"] = "adamax"
    learning_rate: float = Field(0.001, gt=0, lt=1)
    l2: float = Field(1e-4, ge=0)
    max_epochs: int = Field(15, ge=1)
    patience: int = Field(3, ge=1)
    seed: int = 0
    augment: bool = True
    preprocess: Literal["raw", "mask", "edges"] = "raw"
    depth: Literal["shallow", "canonical", "deep"] = "canonical"
    filters: int = Field(32, ge=1)
    dense_layers: int = Field(2, ge=1, le=3)
    dense_units: int = Field(32, ge=1)
    dropout: float = Field(0.0, ge=0, lt=1)
    workers: int = Field(0, ge=0)


class LayerSpec(BaseModel):
    kind: Literal["conv", "maxpool", "flatten", "dense", "dropout"]
    filters: Union[int, None] = None
    kernel_size: int = 3
    pool_size: int = 2
    units: Union[int, None] = None
    rate: float = 0.0
    activation: Literal["relu", "softmax"] = "relu"
    # dropped instead of failing when the spatial extent is already below 2
    optional: bool = False


class LimeConfig(BaseModel):
    samples: int = Field(1000, ge=2)
    kernel_width: float = Field(0.25, gt=0)
    ridge: float = Field(1.0, ge=0)
    top_k: int = Field(5, ge=1)
    seed: int = 0


class ShapConfig(BaseModel):
    mode: Literal["auto", "exact", "sampled"] = "auto"
    samples: int = Field(2048, ge=1)
    seed: int = 0


class SampleRecord(BaseModel):
    path: str
    label: int
    split: Union[str, None] = None


class SplitManifest(BaseModel):
    seed: int
    ratios: list[float]
    classes: dict[str, dict[str, list[str]]]
    fingerprint: dict[str, int]

    def files(self, split):
        records = []
        for label, name in enumerate(CLASS_NAMES):
            for path in self.classes.get(name, {}).get(split, []):
                records.append(SampleRecord(path=path, label=label, split=split))
        return records

    def counts(self, split):
        return {name: len(self.classes.get(name, {}).get(split, [])) for name in CLASS_NAMES}


class DimensionSummary(BaseModel):
    min_width: int
    max_width: int
    min_height: int
    max_height: int


class DatasetStats(BaseModel):
    counts: dict[str, int]
    total: int
    dimensions: Union[dict[str, DimensionSummary], None] = None

    @model_validator(mode="after")
    def check_total(self):
        if self.total != sum(self.counts.values()):
            raise ValueError("total must equal the sum of per-class counts")
        return self


class EpochReport(BaseModel):
    epoch: int
    train_loss: float = Field(ge=0)
    train_acc: float = Field(ge=0, le=1)
    val_loss: float = Field(ge=0)
    val_acc: float = Field(ge=0, le=1)
    seconds: float


class GradientCheckReport(BaseModel):
    per_tensor: dict[str, float]
    max_error: float
    n_checked: int
    n_redrawn: int = 0


class SweepRow(BaseModel):
    config: dict[str, Union[float, int]]
    val_accuracy: Union[float, None] = None
    val_loss: Union[float, None] = None
    epochs_to_best: Union[int, None] = None
    seconds: float = 0.0
    status: str = "ok"


class ClassMetrics(BaseModel):
    precision: float
    recall: float
    f1: float
    auc: Union[float, None] = None
    support: int = 0


class ClassReport(BaseModel):
    per_class: dict[str, ClassMetrics]
    macro: ClassMetrics
    accuracy: float
    zero_division: list[str] = []


class LimeExplanation(BaseModel):
    target: int
    coefficients: list[float]
    intercept: float
    top_k: list[int]
    ridge: float
    samples: int
    kernel_width: float
    fidelity_r2: float
    seed: int


class ShapExplanation(BaseModel):
    phi: list[list[float]]
    base_values: list[float]
    outputs: list[float]
    method: Literal["exact", "sampled"]
    segments: int
    samples: int
    seed: int

    @field_validator("phi")
    @classmethod
    def check_rows(cls, phi):
        if len({len(row) for row in phi}) > 1:
            raise ValueError("phi rows must have equal length")
        return phi


class HardwareInfo(BaseModel):
    cpu_count: int
    cpu_load: float
    ram_total_mb: float
    ram_usage: float
    process_rss_mb: float


class RunConfig(BaseModel):
    command: str
    args: dict
    outdir: str
    seed: int = 0
    data_root: Union[str, None] = None
    hardware: Union[HardwareInfo, None] = None
    model_config = ConfigDict(extra="forbid")
