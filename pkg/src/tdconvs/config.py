"""Run configuration: flat ``section.key = value`` text files resolved
against named profiles (isprs, lasdu, synth, custom). Every omitted key
is filled from the profile; unknown keys and type mismatches are config
errors. The fully resolved config is echoed next to the run outputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

from .errors import ConfigError
from .net import NetworkConfig

ISPRS_CLASS_NAMES = ["powerline", "low_veg", "imp_surf", "car", "fence",
                     "roof", "facade", "shrub", "tree"]
LASDU_CLASS_NAMES = ["ground", "buildings", "trees", "low_veg", "artifacts"]
SYNTH_CLASS_NAMES = ["ground", "roof", "tree", "car", "powerline"]


@dataclass
class RunConfig:
    profile: str = "synth"
    train_path: str = ""
    eval_path: str = ""
    columns: list[str] = field(default_factory=lambda: ["x", "y", "z", "feature", "label"])
    n_classes: int = 5
    class_names: list[str] = field(default_factory=list)
    patch_size_m: float = 30.0
    n_input_points: int = 4096
    level_sizes: list[int] = field(default_factory=lambda: [4096, 1024, 256, 64])
    map_specs: list[tuple[int, int]] = field(
        default_factory=lambda: [(40, 40), (20, 20), (10, 10), (5, 5)])
    volume_spec: tuple[int, int, int] = (40, 40, 5)
    widths: list[int] = field(default_factory=lambda: [64, 128, 256, 512])
    k_c: int = 4
    k_s: int = 8
    knn_sizes: list[int] = field(default_factory=lambda: [16, 32, 64])
    input_feat_dim: int = 0          # 0 = infer from the data
    softmax_weights: bool = False
    spdconv_enabled: bool = True
    loss_weights: list[float] = field(default_factory=lambda: [1.0, 2.0, 2.0, 2.0, 2.0])
    batch_size: int = 4
    lr: float = 0.0002
    epochs: int = 500
    steps: int = 0                   # > 0 overrides the epoch count
    seed: int = 0
    checkpoint_every: int = 100
    checkpoint: str = ""             # eval/predict input; default <out>/model_final.tdcv
    synth_points: int = 4096
    out_dir: str = ""

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if self.lr <= 0:
            raise ConfigError("train.lr must be > 0")
        if self.n_classes < 2:
            raise ConfigError("data.n_classes must be >= 2")

    def network_config(self, input_feat_dim: int) -> NetworkConfig:
        return NetworkConfig(
            n_classes=self.n_classes,
            input_feat_dim=input_feat_dim,
            n_input_points=self.n_input_points,
            level_sizes=tuple(self.level_sizes),
            map_specs=tuple(tuple(m) for m in self.map_specs),
            volume_spec=tuple(self.volume_spec),
            channel_widths=tuple(self.widths),
            k_c=self.k_c, k_s=self.k_s,
            knn_sizes=tuple(self.knn_sizes),
            loss_weights=tuple(self.loss_weights),
            spdconv_enabled=self.spdconv_enabled,
            softmax_weights=self.softmax_weights)


# key name in the file -> (RunConfig attribute, parser)

def _parse_int(v):
    return int(v)


def _parse_float(v):
    return float(v)


def _parse_bool(v):
    if v.lower() in ("true", "1", "yes", "on"):
        return True
    if v.lower() in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: '{v}'")


def _parse_str(v):
    return v


def _parse_str_list(v):
    return [s.strip() for s in v.split(",") if s.strip()]


def _parse_int_list(v):
    return [int(s) for s in v.split(",") if s.strip()]


def _parse_float_list(v):
    return [float(s) for s in v.split(",") if s.strip()]


def _parse_grid2d_list(v):
    out = []
    for item in v.split(","):
        h, w = item.lower().split("x")
        out.append((int(h), int(w)))
    return out


def _parse_grid3d(v):
    h, w, z = v.lower().split("x")
    return (int(h), int(w), int(z))


KEYS = {
    "profile": ("profile", _parse_str),
    "data.train_path": ("train_path", _parse_str),
    "data.eval_path": ("eval_path", _parse_str),
    "data.columns": ("columns", _parse_str_list),
    "data.n_classes": ("n_classes", _parse_int),
    "data.class_names": ("class_names", _parse_str_list),
    "data.patch_size_m": ("patch_size_m", _parse_float),
    "net.n_input_points": ("n_input_points", _parse_int),
    "net.level_sizes": ("level_sizes", _parse_int_list),
    "net.map_specs": ("map_specs", _parse_grid2d_list),
    "net.volume_spec": ("volume_spec", _parse_grid3d),
    "net.widths": ("widths", _parse_int_list),
    "net.k_c": ("k_c", _parse_int),
    "net.k_s": ("k_s", _parse_int),
    "net.knn_sizes": ("knn_sizes", _parse_int_list),
    "net.input_feat_dim": ("input_feat_dim", _parse_int),
    "net.softmax_weights": ("softmax_weights", _parse_bool),
    "net.spdconv_enabled": ("spdconv_enabled", _parse_bool),
    "loss.weights": ("loss_weights", _parse_float_list),
    "train.batch_size": ("batch_size", _parse_int),
    "train.lr": ("lr", _parse_float),
    "train.epochs": ("epochs", _parse_int),
    "train.steps": ("steps", _parse_int),
    "train.seed": ("seed", _parse_int),
    "train.checkpoint_every": ("checkpoint_every", _parse_int),
    "eval.checkpoint": ("checkpoint", _parse_str),
    "synth.n_points": ("synth_points", _parse_int),
    "out.dir": ("out_dir", _parse_str),
}

PROFILES = {
    "isprs": {
        "columns": ["x", "y", "z", "feature", "ignore", "ignore", "label"],
        "n_classes": 9,
        "class_names": list(ISPRS_CLASS_NAMES),
        "patch_size_m": 30.0,
        "loss_weights": [1.0, 2.0, 2.0, 2.0, 2.0],
        "batch_size": 4,
        "lr": 0.0002,
        "epochs": 500,
    },
    "lasdu": {
        "columns": ["x", "y", "z", "feature", "label"],
        "n_classes": 5,
        "class_names": list(LASDU_CLASS_NAMES),
        "patch_size_m": 50.0,
        "loss_weights": [1.0, 5.0, 5.0, 5.0, 5.0],
        "batch_size": 4,
        "lr": 0.0002,
        "epochs": 500,
    },
    "synth": {
        # desk-scale defaults: a single generated tile, reduced widths,
        # step-count based training
        "columns": ["x", "y", "z", "feature", "label"],
        "n_classes": 5,
        "class_names": list(SYNTH_CLASS_NAMES),
        "patch_size_m": 30.0,
        "loss_weights": [1.0, 2.0, 2.0, 2.0, 2.0],
        "widths": [16, 32, 64, 128],
        "batch_size": 1,
        "lr": 0.0002,
        "epochs": 1,
        "steps": 300,
        "train_path": "synth_scene.txt",
        "eval_path": "synth_scene.txt",
    },
    "custom": {},
}


def parse_config(path=None, profile: str | None = None) -> RunConfig:
    """Resolve a config file against its profile. ``profile`` overrides a
    ``profile =`` line in the file; with no file at all the named (or
    synth) profile's defaults are returned."""
    file_items: list[tuple[str, str, int]] = []
    if path is not None:
        with open(path) as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ConfigError(f"{path}: line {lineno}: expected 'key = value'")
                key, value = (s.strip() for s in line.split("=", 1))
                file_items.append((key, value, lineno))

    values: dict[str, object] = {}
    for key, value, lineno in file_items:
        if key not in KEYS:
            raise ConfigError(f"{path}: line {lineno}: unknown key '{key}'")
        attr, parser = KEYS[key]
        try:
            values[attr] = parser(value)
        except (ValueError, IndexError) as exc:
            raise ConfigError(
                f"{path}: line {lineno}: bad value for '{key}': {exc}") from exc

    name = profile or values.get("profile", "synth")
    if name not in PROFILES:
        raise ConfigError(
            f"unknown profile '{name}' (expected one of {sorted(PROFILES)})")
    merged = dict(PROFILES[name])
    merged.update(values)
    merged["profile"] = name
    try:
        return RunConfig(**merged)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _format_value(attr: str, value) -> str:
    if attr == "map_specs":
        return ",".join(f"{h}x{w}" for h, w in value)
    if attr == "volume_spec":
        return "x".join(str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ",".join(str(v) for v in value)
    return str(value)


def write_config(path, cfg: RunConfig) -> None:
    """Echo the fully resolved config in the flat key format."""
    attr_to_key = {attr: key for key, (attr, _) in KEYS.items()}
    with open(path, "w") as fh:
        for f in fields(cfg):
            key = attr_to_key.get(f.name)
            if key is None:
                continue
            fh.write(f"{key} = {_format_value(f.name, getattr(cfg, f.name))}\n")
