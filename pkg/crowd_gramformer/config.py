"""
Configuration settings for the Gramformer crowd counter
"""
from dataclasses import dataclass, field, fields, replace
from typing import Any, Dict, List, Tuple

from .exceptions import ConfigError

# Model Settings
DEFAULT_CHANNELS = 64
DEFAULT_HEADS = 4
DEFAULT_LAYERS = 2           # L
DEFAULT_NEIGHBOR_FRACTION = 0.3   # q, fraction of nodes taken as neighbors
DEFAULT_INDEGREE_BOUND = 18  # m, in-degree bound
DEFAULT_REG_WEIGHT = 0.1     # lambda, edge regularization weight
DEFAULT_PATCH = 8
DEFAULT_SIGMA = 2.0          # density Gaussian of generated scenes, image pixels
LAYER_NORM_EPS = 1e-5

VARIANTS = ("gramformer", "vanilla", "graphormer")
GRAPH_MODES = ("static", "dynamic")

# Optimizer Settings
DEFAULT_LEARNING_RATE = 1e-3  # 1e-5 stalls on 64x64 scenes
DEFAULT_BETAS = (0.9, 0.999)
DEFAULT_WARMUP = 100         # linear warmup steps
DEFAULT_LR_FLOOR = 0.05       # final rate as a fraction of lr under the cosine schedule
LR_SCHEDULES = ("constant", "cosine")
ADAM_EPS = 1e-8

# Training Settings
DEFAULT_ITERATIONS = 2000
DEFAULT_EVAL_INTERVAL = 100
DEFAULT_BATCH_SIZE = 4
DEFAULT_LOSS = "mse_count"
SCALE_RANGE = (0.75, 1.25)

# Data Settings
DEFAULT_IMAGE_SIZE = 64      # square scenes
DEFAULT_TRAIN_SCENES = 200
DEFAULT_TEST_SCENES = 50
MANIFEST_NAME = "manifest.txt"
SCENE_SPEC_NAME = "scene_spec.txt"
PGM_MAXVAL = 65535

# Verification Settings
GRADCHECK_STEP = 1e-5
GRADCHECK_TOLERANCE = 1e-4
GRADCHECK_IMAGE_SIZE = 32     # 32x32 at patch 8 gives N = 16 nodes
GRADCHECK_CHANNELS = 8
GRADCHECK_HEADS = 2
GRADCHECK_LAYERS = 2

# Exit codes
EXIT_OK = 0
EXIT_VERIFICATION_FAILED = 1
EXIT_USAGE = 2


def _doc(text: str) -> Dict[str, str]:
    return {"doc": text}


@dataclass
class ModelConfig:
    """Architecture and loss hyperparameters"""
    channels: int = field(default=DEFAULT_CHANNELS, metadata=_doc("C, node feature width"))
    heads: int = field(default=DEFAULT_HEADS, metadata=_doc("S, attention heads (and EWR heads)"))
    layers: int = field(default=DEFAULT_LAYERS, metadata=_doc("L, transformer layers"))
    q: float = field(default=DEFAULT_NEIGHBOR_FRACTION, metadata=_doc("fraction of nodes kept as nearest neighbors"))
    m: int = field(default=DEFAULT_INDEGREE_BOUND, metadata=_doc("upper bound of the centrality index"))
    reg_weight: float = field(default=DEFAULT_REG_WEIGHT, metadata=_doc("lambda, weight of the edge regularization"))
    patch: int = field(default=DEFAULT_PATCH, metadata=_doc("patch stride of the encoder, image pixels"))
    variant: str = field(default="gramformer", metadata=_doc("gramformer | vanilla | graphormer"))
    use_ewr: bool = field(default=True, metadata=_doc("gramformer only: modulate attention by the EWR graph"))
    use_centrality: bool = field(default=True, metadata=_doc("gramformer only: add centrality embeddings"))
    graph_mode: str = field(default="static", metadata=_doc("static: graph from v0 only | dynamic: rebuilt per layer"))
    centrality_mode: str = field(default="dynamic", metadata=_doc("dynamic: indices per layer | static: from v0 only"))

    def validate(self) -> "ModelConfig":
        """Check the config invariants, returning self"""
        if self.channels < 4 or self.channels % 4 != 0:
            raise ConfigError(f"channels must be a positive multiple of 4, got {self.channels}")
        if self.heads < 1 or self.channels % self.heads != 0:
            raise ConfigError(f"channels ({self.channels}) must be divisible by heads ({self.heads})")
        if self.layers < 1:
            raise ConfigError(f"layers must be >= 1, got {self.layers}")
        if not 0.0 < self.q <= 1.0:
            raise ConfigError(f"q must lie in (0, 1], got {self.q}")
        if self.m < 1:
            raise ConfigError(f"m must be >= 1, got {self.m}")
        if self.reg_weight < 0:
            raise ConfigError(f"reg_weight must be >= 0, got {self.reg_weight}")
        if self.patch < 1:
            raise ConfigError(f"patch must be >= 1, got {self.patch}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant '{self.variant}' (expected one of {', '.join(VARIANTS)})")
        for name in ("graph_mode", "centrality_mode"):
            if getattr(self, name) not in GRAPH_MODES:
                raise ConfigError(f"{name} must be one of {', '.join(GRAPH_MODES)}")
        return self

    @property
    def uses_graph(self) -> bool:
        """Attention is multiplied by the EWR attention graph"""
        return self.variant == "gramformer" and self.use_ewr

    @property
    def uses_centrality(self) -> bool:
        """Nodes receive centrality embeddings before attention"""
        if self.variant == "vanilla":
            return False
        if self.variant == "graphormer":
            return True
        return self.use_centrality

    @property
    def uses_edge_bias(self) -> bool:
        return self.variant == "graphormer"

    @property
    def needs_neighbors(self) -> bool:
        return self.uses_centrality or self.uses_edge_bias


@dataclass
class RunConfig(ModelConfig):
    """Flat run configuration: model fields plus data, optimizer and output settings"""
    train_data: str = field(default="", metadata=_doc("training dataset directory"))
    eval_data: str = field(default="", metadata=_doc("evaluation dataset directory (empty: same as train_data)"))
    iterations: int = field(default=DEFAULT_ITERATIONS, metadata=_doc("optimizer steps"))
    eval_interval: int = field(default=DEFAULT_EVAL_INTERVAL, metadata=_doc("steps between evaluations / metric rows"))
    batch_size: int = field(default=DEFAULT_BATCH_SIZE, metadata=_doc("scenes per optimizer step"))
    seed: int = field(default=0, metadata=_doc("seed for initialization, data order and augmentation"))
    lr: float = field(default=DEFAULT_LEARNING_RATE, metadata=_doc("Adam learning rate"))
    lr_schedule: str = field(default="cosine",
                             metadata=_doc("constant | cosine: linear warmup, then cosine decay to lr_floor * lr"))
    warmup: int = field(default=DEFAULT_WARMUP, metadata=_doc("warmup steps of the cosine schedule"))
    lr_floor: float = field(default=DEFAULT_LR_FLOOR, metadata=_doc("final learning rate as a fraction of lr"))
    beta1: float = field(default=DEFAULT_BETAS[0], metadata=_doc("Adam first-moment decay"))
    beta2: float = field(default=DEFAULT_BETAS[1], metadata=_doc("Adam second-moment decay"))
    adam_eps: float = field(default=ADAM_EPS, metadata=_doc("Adam denominator epsilon"))
    loss: str = field(default=DEFAULT_LOSS, metadata=_doc("registered density loss name"))
    out_dir: str = field(default="runs", metadata=_doc("output directory for checkpoints and logs"))
    augment_flip: bool = field(default=True, metadata=_doc("random horizontal flip"))
    augment_scale: bool = field(default=False, metadata=_doc("random scaling in [scale_min, scale_max]"))
    scale_min: float = field(default=SCALE_RANGE[0], metadata=_doc("lower random scaling factor"))
    scale_max: float = field(default=SCALE_RANGE[1], metadata=_doc("upper random scaling factor"))

    def validate(self) -> "RunConfig":
        super().validate()
        if self.iterations < 0:
            raise ConfigError(f"iterations must be >= 0, got {self.iterations}")
        if self.eval_interval < 1:
            raise ConfigError(f"eval_interval must be >= 1, got {self.eval_interval}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ConfigError(f"lr_schedule must be one of {', '.join(LR_SCHEDULES)}")
        if self.warmup < 0:
            raise ConfigError(f"warmup must be >= 0, got {self.warmup}")
        if not 0 <= self.lr_floor <= 1:
            raise ConfigError(f"lr_floor must lie in [0, 1], got {self.lr_floor}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        if not 0 < self.scale_min <= self.scale_max:
            raise ConfigError("scaling range must satisfy 0 < scale_min <= scale_max")
        return self

    def model_config(self) -> ModelConfig:
        """Extract the architecture part of the run config"""
        values = {f.name: getattr(self, f.name) for f in fields(ModelConfig)}
        return ModelConfig(**values)

    @property
    def betas(self) -> Tuple[float, float]:
        return (self.beta1, self.beta2)

    def override(self, **changes: Any) -> "RunConfig":
        """Copy with some keys replaced, validated"""
        unknown = [key for key in changes if key not in config_keys()]
        if unknown:
            raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
        return replace(self, **changes).validate()


def config_keys() -> List[str]:
    """All keys accepted in a run config file, in declaration order"""
    return [f.name for f in fields(RunConfig)]


def _parse_value(kind: type, text: str, key: str, line_number: int) -> Any:
    try:
        if kind is bool:
            lowered = text.lower()
            if lowered in ("true", "yes", "on", "1"):
                return True
            if lowered in ("false", "no", "off", "0"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"line {line_number}: invalid {kind.__name__} value for '{key}': {text!r}")


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_key_values(text: str, allowed: Dict[str, type]) -> Dict[str, Any]:
    """Parse flat 'key = value' lines against a key -> type table"""
    values: Dict[str, Any] = {}
    for line_number, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {line_number}: expected 'key = value', got {raw_line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in allowed:
            raise ConfigError(f"line {line_number}: unknown key '{key}'")
        if key in values:
            raise ConfigError(f"line {line_number}: duplicate key '{key}'")
        values[key] = _parse_value(allowed[key], value, key, line_number)
    return values


def parse_config_text(text: str) -> RunConfig:
    """Parse a run config; keys not present keep their defaults"""
    allowed = {f.name: f.type for f in fields(RunConfig)}
    return RunConfig(**parse_key_values(text, allowed)).validate()


def load_config(path: str) -> RunConfig:
    """Read a UTF-8 run config file"""
    try:
        with open(path, encoding="utf-8") as handle:
            text = handle.read()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}")
    return parse_config_text(text)


def format_config(config: RunConfig) -> str:
    """Render every key with its doc comment; parse_config_text inverts this"""
    lines = []
    for f in fields(config):
        lines.append(f"# {f.metadata.get('doc', '')}")
        lines.append(f"{f.name} = {_format_value(getattr(config, f.name))}")
    return "\n".join(lines) + "\n"


def save_config(config: RunConfig, path: str):
    with open(path, "w", encoding="utf-8") as handle:
        handle.write(format_config(config))
