"""
Run configuration: flat config files and the validated per-command settings.

A config file holds ``key = value`` lines; ``#`` starts a comment line and
blank lines are ignored. Keys use the long flag names, with ``-`` or ``_``.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict

from spamlens.cnn_model import TrainConfig
from spamlens.errors import ConfigError
from spamlens.lime_explainer import LimeConfig
from spamlens.saliency_heatmap import OcclusionConfig
from spamlens.shap_explainer import ShapConfig

log = logging.getLogger(__name__)

COMMANDS = ("ingest", "train", "eval", "explain", "gen-synthetic")
EXPLAIN_METHODS = ("lime", "shap", "heatmap")
TRUE_VALUES = ("true", "yes", "on", "1")
FALSE_VALUES = ("false", "no", "off", "0")


def normalize_key(key: str) -> str:
    return key.strip().lstrip("-").replace("-", "_")


def parse_bool(value: str, key: str) -> bool:
    lowered = value.strip().lower()
    if lowered in TRUE_VALUES:
        return True
    if lowered in FALSE_VALUES:
        return False
    raise ConfigError(f"'{key}' expects true or false, got {value!r}")


def load_config_file(path) -> Dict[str, str]:
    """Read a flat ``key = value`` config file.

    Args:
        path (str or Path): Config file.

    Returns:
        dict: Normalised keys to raw string values, in file order.

    Raises:
        FileNotFoundError: If ``path`` does not exist.
        ConfigError: On a line without ``=``, an empty key or a repeated key;
            the message names the line number.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Config file not found: {path}")
    values = {}
    for number, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        key, sep, value = stripped.partition("=")
        key = normalize_key(key)
        if not sep or not key:
            raise ConfigError(f"{path}:{number}: expected 'key = value', got {line!r}")
        if key in values:
            raise ConfigError(f"{path}:{number}: '{key}' is set twice")
        values[key] = value.strip()
    log.debug("loaded %d settings from %s", len(values), path)
    return values


def _given(options: Dict[str, Any], mapping: Dict[str, str]) -> Dict[str, Any]:
    """Constructor kwargs for the options that were set, renamed per ``mapping``."""
    return {target: options[source] for source, target in mapping.items() if options.get(source) is not None}


@dataclass
class RunConfig:
    """Resolved settings of one CLI command.

    ``options`` are the parsed flags after config-file defaults were merged
    under them. Construction validates every value against the module config
    that will consume it, so invalid settings fail before any work starts.
    """

    command: str
    options: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise ConfigError(f"Unknown command {self.command!r}")
        self.validate()

    @classmethod
    def from_namespace(cls, args) -> "RunConfig":
        options = {key: value for key, value in vars(args).items() if key != "command"}
        return cls(command=args.command, options=options)

    @property
    def seed(self) -> int:
        return self.options.get("seed") or 0

    @property
    def threads(self):
        return self.options.get("threads")

    def validate(self):
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")
        if self.threads is not None and self.threads < 1:
            raise ConfigError(f"threads must be at least 1, got {self.threads}")

        if self.command == "train":
            self.train_config()
        elif self.command == "explain":
            self.explainer_config()
        elif self.command == "eval":
            threshold = self.options.get("threshold", 0.5)
            if not 0 < threshold < 1:
                raise ConfigError(f"threshold must be in (0, 1), got {threshold}")
        elif self.command == "gen-synthetic":
            n = self.options.get("n")
            if n is None or n < 1:
                raise ConfigError(f"n must be at least 1, got {n}")

    def train_config(self) -> TrainConfig:
        kwargs = _given(
            self.options,
            {"learning_rate": "learning_rate", "epochs": "epochs", "batch_size": "batch_size"},
        )
        return TrainConfig(seed=self.seed, **kwargs)

    def explainer_config(self):
        """LimeConfig, ShapConfig or OcclusionConfig for the selected method."""
        method = self.options.get("method")
        if method == "lime":
            kwargs = _given(
                self.options,
                {
                    "segments": "num_segments",
                    "samples": "num_samples",
                    "kernel_width": "kernel_width",
                    "ridge": "ridge",
                    "max_features": "max_features",
                },
            )
            if "num_segments" in kwargs and "max_features" not in kwargs:
                kwargs["max_features"] = min(LimeConfig.max_features, kwargs["num_segments"])
            return LimeConfig(seed=self.seed, **kwargs)
        if method == "shap":
            kwargs = _given(
                self.options,
                {
                    "segments": "num_segments",
                    "coalitions": "num_coalitions",
                    "exact_threshold": "exact_threshold",
                    "regularization": "regularization",
                },
            )
            return ShapConfig(seed=self.seed, **kwargs)
        if method == "heatmap":
            return OcclusionConfig(**_given(self.options, {"patch_size": "patch_size", "stride": "stride"}))
        raise ConfigError(f"Unknown explanation method {method!r}; choose from {', '.join(EXPLAIN_METHODS)}")
