"""Run configuration: one JSON document with dataset/models/oracle/budget/gan/eval sections.

Every field is optional.  Unknown keys are rejected with their dotted path.
The resolved document (defaults filled in, seed overrides applied) is what
gets hashed and echoed into reports.
"""

import copy
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .attacks import AttackBudget
from .attribution import AttributionConfig
from .errors import ConfigError
from .freq import FreqExploreConfig
from .gan import GanTrainConfig
from .oracles import METHODS, OracleConfig
from .zoo import ARCHITECTURES, SyntheticDatasetConfig, TrainConfig

SEED_ENV = "GRADEDIT_SEED"
GAN_VARIANTS = ("baseline",) + METHODS
DEFAULT_CONFIG = Path(__file__).parent / "configs" / "desk.json"


@dataclass
class ModelsSection:
    archs: tuple = ARCHITECTURES
    surrogate: str = "small_cnn_a"
    victims: tuple = ("small_cnn_b", "small_mlp", "tiny_attention")
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        self.archs = tuple(self.archs)
        self.victims = tuple(self.victims)
        unknown = [a for a in self.archs if a not in ARCHITECTURES]
        if unknown:
            raise ConfigError(f"models.archs: unknown architectures {unknown}")
        for name in (self.surrogate,) + self.victims:
            if name not in self.archs:
                raise ConfigError(f"models: {name!r} is not listed in models.archs")


@dataclass
class EvalSection:
    attack_methods: tuple = METHODS
    gan_methods: tuple = ("baseline", "fsps")
    num_eval: int = 500
    fps_batch_size: int = 100
    fps_warmup_batches: int = 1
    fps_timed_batches: int = 2
    plot: bool = False

    def __post_init__(self):
        self.attack_methods = tuple(self.attack_methods)
        self.gan_methods = tuple(self.gan_methods)
        for m in self.attack_methods:
            if m not in METHODS:
                raise ConfigError(f"eval.attack_methods: unknown method {m!r}")
        for m in self.gan_methods:
            if m not in GAN_VARIANTS:
                raise ConfigError(f"eval.gan_methods: unknown variant {m!r}")
        if self.num_eval < 1 or self.fps_batch_size < 1 or self.fps_timed_batches < 1 or self.fps_warmup_batches < 0:
            raise ConfigError("eval: num_eval, fps_batch_size, fps_timed_batches must be >= 1")


@dataclass
class RunConfig:
    seed: int = 0
    dataset: SyntheticDatasetConfig = field(default_factory=SyntheticDatasetConfig)
    models: ModelsSection = field(default_factory=ModelsSection)
    oracle: OracleConfig = field(default_factory=OracleConfig)
    budget: AttackBudget = field(default_factory=AttackBudget)
    gan: GanTrainConfig = field(default_factory=GanTrainConfig)
    eval: EvalSection = field(default_factory=EvalSection)

    def to_dict(self):
        return _plain(asdict(self))

    def hash(self):
        return config_hash(self.to_dict())

    def gan_config(self, method):
        """GanTrainConfig for a variant; GE variants take the oracle section with ``method`` swapped in."""
        oracle = OracleConfig(**{**asdict(self.oracle), "method": method if method != "baseline" else self.oracle.method})
        return GanTrainConfig(**{**_shallow(self.gan), "oracle": oracle})

    def oracle_config(self, method):
        return OracleConfig(**{**asdict(self.oracle), "method": method})


# Nested dataclass types per section, used to reject unknown keys at any depth.
_NESTED = {
    ("models", "train"): TrainConfig,
    ("oracle", "freq"): FreqExploreConfig,
    ("oracle", "attribution"): AttributionConfig,
    ("gan", "freq"): FreqExploreConfig,
}
_SECTIONS = {
    "dataset": SyntheticDatasetConfig,
    "models": ModelsSection,
    "oracle": OracleConfig,
    "budget": AttackBudget,
    "gan": GanTrainConfig,
    "eval": EvalSection,
}


def _shallow(obj):
    return {f.name: getattr(obj, f.name) for f in fields(obj)}


def _plain(value):
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def _check_keys(doc, cls, path):
    if not isinstance(doc, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(doc).__name__}")
    allowed = {f.name for f in fields(cls)}
    for key in doc:
        if key not in allowed:
            raise ConfigError(f"unknown config key {path + '.' if path else ''}{key}")


def _build(cls, doc, path):
    _check_keys(doc, cls, path)
    kwargs = dict(doc)
    section = path.split(".")[0]
    for key, value in doc.items():
        nested = _NESTED.get((section, key))
        if nested is not None and value is not None:
            kwargs[key] = _build(nested, value, f"{path}.{key}")
    if cls is GanTrainConfig and "oracle" in kwargs:
        raise ConfigError("gan.oracle is not configurable here; the oracle section and --method select it")
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    except TypeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def resolve_seed(file_seed, flag_seed=None, env=None):
    """Precedence: --seed flag, then the GRADEDIT_SEED variable, then the file."""
    env = os.environ if env is None else env
    if flag_seed is not None:
        return int(flag_seed)
    if env.get(SEED_ENV, "").strip():
        try:
            return int(env[SEED_ENV])
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from exc
    return int(file_seed)


def build_run_config(doc=None, flag_seed=None, env=None, overrides=None):
    """Validate a config document and return a RunConfig.

    The run seed propagates to every seeded section that does not set its own
    seed (the dataset keeps its own so the data stays fixed across run seeds).
    ``overrides`` is a nested dict merged over ``doc`` (used for CLI flags).
    """
    doc = copy.deepcopy(doc or {})
    if overrides:
        for section, values in overrides.items():
            if isinstance(values, dict):
                doc.setdefault(section, {}).update(values)
            else:
                doc[section] = values
    _check_keys(doc, RunConfig, "")
    seed = resolve_seed(doc.get("seed", 0), flag_seed, env)
    built = {}
    for name, cls in _SECTIONS.items():
        section = copy.deepcopy(doc.get(name, {}))
        if section is None:
            section = {}
        if not isinstance(section, dict):
            raise ConfigError(f"{name}: expected an object")
        if name in ("oracle", "budget", "gan"):
            section.setdefault("seed", seed)
        if name == "models":
            train = section.setdefault("train", {})
            if isinstance(train, dict):
                train.setdefault("seed", seed)
        built[name] = _build(cls, section, name)
    return RunConfig(seed=seed, **built)


def load_run_config(path=None, flag_seed=None, env=None, overrides=None):
    doc = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return build_run_config(doc, flag_seed, env, overrides)


def config_hash(doc):
    canonical = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()
