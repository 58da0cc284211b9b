"""Pipeline configuration: ``key = value`` files, presets and the config hash.

Precedence is defaults < preset < file < command-line flags. The hash is a
64-bit FNV-1a over the canonical ``key=value`` text of every setting that
can change results (output directory, thread count and slice dumping are
excluded).
"""

from dataclasses import dataclass, fields, replace
from pathlib import Path

from .exceptions import ConfigTypeError, ConstraintViolation, IoFailure, UnknownKey

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_MASK64 = (1 << 64) - 1

# image size (voxels), isotropic resolution (micrometers), foreground threshold, final clusters
PRESETS = {
    "lung-A": {"dims": (756, 520, 545), "spacing": 27.1, "threshold": 4000, "C": 100},
    "lung-B": {"dims": (594, 602, 624), "spacing": 29.63, "threshold": 2820, "C": 10},
    "lung-C": {"dims": (477, 454, 971), "spacing": 29.51, "threshold": 4700, "C": 100},
}

_UNHASHED = frozenset({"outdir", "threads", "dump_pgm"})


@dataclass(frozen=True)
class PipelineConfig:
    """Every tunable of the pipeline, keyed by its config-file name."""

    # paths
    input: str = ""
    truth: str = ""
    outdir: str = "out"
    preset: str = ""
    # sampler
    ns: int = 10000
    w: int = 27
    threshold: int = 0
    seed: int = 0
    # joint clustering / training
    C: int = 100
    eta: float = 0.9
    epochs: int = 1
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-5
    batch_size: int = 128
    Ks: int = 20
    a: float = 1.0
    # segmentation and evaluation
    stride: int = 5
    K: int = 3
    levels: int = 2
    slices: str = "all"
    baselines: bool = True
    dump_pgm: bool = False
    # synthetic phantom
    phantom_dims: tuple = (96, 96, 96)
    phantom_layout: str = "slabs"
    phantom_means: tuple = (12000.0, 12000.0, 5000.0)
    phantom_noise: tuple = (300.0, 2500.0, 300.0)
    phantom_smoothing: int = 1
    phantom_seed: int = 7
    # runtime
    threads: int = 0

    def validate(self):
        def bad(key, why):
            raise ConstraintViolation(f"{key}: {why} (got {getattr(self, key)!r})")

        if self.preset and self.preset not in PRESETS:
            bad("preset", f"must be one of {sorted(PRESETS)}")
        if self.ns < 2:
            bad("ns", "must be >= 2")
        if self.w < 1 or self.w % 2 == 0:
            bad("w", "must be a positive odd integer")
        if not 1 <= self.stride <= self.w:
            bad("stride", "must lie in [1, w]")
        if self.stride % 2 == 0:
            bad("stride", "must be odd so each label block is centered")
        if not 1 <= self.C < self.ns:
            bad("C", "must satisfy 1 <= C < ns")
        if not 0 < self.eta < 1:
            bad("eta", "must lie in (0, 1)")
        if self.epochs < 1:
            bad("epochs", "must be >= 1")
        if not self.learning_rate > 0:
            bad("learning_rate", "must be > 0")
        if not 0 <= self.momentum < 1:
            bad("momentum", "must lie in [0, 1)")
        if self.weight_decay < 0:
            bad("weight_decay", "must be >= 0")
        if self.batch_size < 1:
            bad("batch_size", "must be >= 1")
        if self.Ks < 1:
            bad("Ks", "must be >= 1")
        if not self.a > 0:
            bad("a", "must be > 0")
        if self.K < 2:
            bad("K", "must be >= 2")
        if self.levels not in (1, 2):
            bad("levels", "must be 1 or 2")
        if not 0 <= self.threshold <= 65535:
            bad("threshold", "must lie in the 16-bit range")
        if self.threads < 0:
            bad("threads", "must be >= 0 (0 = no cap)")
        if self.phantom_layout not in ("slabs", "blobs"):
            bad("phantom_layout", "must be 'slabs' or 'blobs'")
        if len(self.phantom_dims) != 3 or min(self.phantom_dims) < 1:
            bad("phantom_dims", "must be three positive integers")
        if len(self.phantom_means) != 3 or len(self.phantom_noise) != 3:
            bad("phantom_means", "phantom means and noise need three entries each")
        if self.phantom_smoothing < 0:
            bad("phantom_smoothing", "must be >= 0")
        self.slice_indices(10 ** 9)
        return self

    def slice_indices(self, nz):
        """Evaluation z-planes: ``all`` -> [], ``auto`` -> 7 evenly spaced, else a comma list."""
        text = self.slices.strip()
        if text in ("", "all"):
            return []
        if text == "auto":
            from .segmenter import default_slices
            return default_slices(nz)
        try:
            idx = [int(v) for v in text.split(",") if v.strip()]
        except ValueError:
            raise ConstraintViolation(f"slices: expected all, auto or a comma list of z indices (got {text!r})")
        if any(i < 0 or i >= nz for i in idx):
            raise ConstraintViolation(f"slices: indices must lie in [0, {nz})")
        return idx

    def canonical_text(self):
        return "".join(f"{k}={_format(v)}\n" for k, v in sorted(self.as_dict().items()) if k not in _UNHASHED)

    def config_hash(self):
        return fnv1a64(self.canonical_text().encode())

    def hash_hex(self):
        return f"{self.config_hash():016x}"

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def jule_config(self):
        from .jule import JuleConfig
        from .net3d import TrainConfig
        train = TrainConfig(self.learning_rate, self.momentum, self.weight_decay, self.batch_size)
        return JuleConfig(self.C, self.eta, self.epochs, train, self.Ks, self.a, self.seed)

    def segmentation_config(self):
        from .segmenter import SegmentationConfig
        return SegmentationConfig(self.w, self.stride, self.K, self.threshold, self.seed)

    def phantom_spec(self):
        from .volume import PhantomSpec
        return PhantomSpec(self.phantom_dims, self.phantom_layout, self.phantom_means,
                           self.phantom_noise, self.phantom_smoothing, self.phantom_seed)


_FIELDS = {f.name: f for f in fields(PipelineConfig)}
_DEFAULTS = PipelineConfig()


def fnv1a64(data):
    h = FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * FNV_PRIME) & _MASK64
    return h


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _coerce(key, text):
    """Parse ``text`` into the type of field ``key``."""
    if key not in _FIELDS:
        raise UnknownKey(f"unknown config key {key!r}")
    default = getattr(_DEFAULTS, key)
    text = str(text).strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            kind = type(default[0])
            return tuple(kind(v) for v in text.replace("x", ",").split(",") if v.strip())
        return text
    except ValueError:
        raise ConfigTypeError(f"{key}: cannot read {text!r} as {type(default).__name__}") from None


def parse_text(text):
    """``key = value`` lines to a dict; ``#`` starts a comment, blank lines are ignored."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigTypeError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key = key.strip()
        values[key] = _coerce(key, value)
    return values


def load_config(path=None, overrides=None):
    """Resolve a :class:`PipelineConfig` from an optional file and flag overrides.

    ``overrides`` maps keys to values (strings are parsed like file values);
    None entries are skipped. A ``preset`` named in either place fills in its
    threshold and final cluster count unless those keys are set explicitly.
    """
    file_values = {}
    if path:
        try:
            file_values = parse_text(Path(path).read_text())
        except OSError as exc:
            raise IoFailure(f"cannot read config {path}: {exc}") from exc
    flag_values = {}
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        flag_values[key] = _coerce(key, value) if isinstance(value, str) else _coerce(key, _format(value))
    explicit = {**file_values, **flag_values}
    preset = explicit.get("preset", "")
    merged = {}
    if preset in PRESETS:
        merged.update({"threshold": PRESETS[preset]["threshold"], "C": PRESETS[preset]["C"]})
    merged.update(explicit)
    return replace(_DEFAULTS, **merged).validate()


def default_config():
    return load_config()

