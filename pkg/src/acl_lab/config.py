"""Experiment configuration: an INI-style file (``key = value`` under ``[sections]``).

Every key is declared in ``SCHEMA``; unknown sections or keys, malformed values
and missing required keys raise ``ConfigError`` naming the field and, when it
appears in the file, its line number.
"""

import configparser
import math
import re
from dataclasses import dataclass, field

from .data import AudioConfig, AugmentationConfig, SyntheticDatasetSpec
from .errors import ConfigError
from .losses import LossConfig

REQUIRED = object()


def _float(s):
    v = float(s)
    if not math.isfinite(v):
        raise ValueError("must be finite")
    return v


def _int(s):
    return int(s)


def _seed(s):
    v = int(s)
    if not 0 <= v < 2 ** 64:
        raise ValueError("must fit in an unsigned 64-bit integer")
    return v


def _angle(s):
    s = s.strip()
    m = re.fullmatch(r"(?:([0-9.eE+-]+)\s*\*\s*)?pi(?:\s*/\s*([0-9.eE+-]+))?", s)
    if m:
        num = float(m.group(1)) if m.group(1) else 1.0
        den = float(m.group(2)) if m.group(2) else 1.0
        return num * math.pi / den
    return _float(s)


def _bool(s):
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected true or false")


def _ints(s):
    parts = [p for p in re.split(r"[,\s]+", s.strip()) if p]
    return tuple(int(p) for p in parts)


def _pair(s):
    parts = [p for p in re.split(r"[,\s]+", s.strip()) if p]
    if len(parts) != 2:
        raise ValueError("expected two comma-separated numbers")
    return (_float(parts[0]), _float(parts[1]))


def _choice(*options):
    def parse(s):
        s = s.strip()
        if s not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return s
    return parse


def _text(s):
    return s.strip()


# section -> key -> (parser, default)
SCHEMA = {
    "experiment": {
        "mode": (_choice("ssl", "supervised"), "ssl"),
        "epochs": (_int, 100),
        "seed": (_seed, 0),
        "output_dir": (_text, "runs/default"),
        "probe_every": (_int, 10),
        "record_wall_time": (_bool, False),
    },
    "loss": {
        "alpha": (_float, REQUIRED),
        "tau": (_float, REQUIRED),
        "m_g": (_angle, math.pi / 2),
    },
    "metrics": {
        "t": (_float, 2.0),
        "tolerance_normalization": (_choice("all_pairs", "same_class"), "all_pairs"),
        "space": (_choice("h", "z"), "z"),
    },
    "dataset": {
        "kind": (_choice("synthetic", "audio", "csv"), "synthetic"),
        "n_classes": (_int, 4),
        "n_per_class": (_int, 200),
        "dim": (_int, 16),
        "cluster_spread": (_float, 0.3),
        "noise_aug": (_float, 0.1),
        "mask_prob": (_float, 0.1),
        "scale_range": (_pair, (0.8, 1.25)),
        "test_fraction": (_float, 0.25),
        "seed": (_seed, 0),
        "path": (_text, ""),
    },
    "audio": {
        "sample_rate": (_int, 22050),
        "n_mels": (_int, 96),
        "frame_len": (_int, 882),
        "hop": (_int, 441),
        "target_frames": (_int, 101),
    },
    "augment": {
        "mixback_lambda_max": (_float, 0.5),
        "crop_scale_range": (_pair, (0.8, 1.0)),
        "freq_mask_max": (_int, 8),
        "time_mask_max": (_int, 10),
        "blur_sigma_range": (_pair, (0.0, 1.0)),
    },
    "encoder": {
        "hidden": (_ints, (256, 256)),
        "d_h": (_int, 64),
        "d_z": (_int, 32),
        "head_hidden": (_int, 64),
        "final_activation": (_choice("identity", "relu"), "identity"),
    },
    "optimizer": {
        "kind": (_choice("adam", "sgd"), "adam"),
        "lr": (_float, 1e-3),
        "batch_size": (_int, 64),
    },
    "probe": {
        "epochs": (_int, 200),
        "lr": (_float, 0.5),
    },
}

# defaults with no canonical value; echoed into every manifest
ARTIFACT_CHOICES = (
    "loss.m_g", "metrics.t", "dataset.*", "audio.*", "augment.*", "encoder.*",
    "optimizer.*", "experiment.epochs", "probe.*",
)


@dataclass(frozen=True)
class ExperimentConfig:
    mode: str
    loss: LossConfig
    values: dict = field(compare=False, repr=False)
    sources: dict = field(default_factory=dict, compare=False, repr=False)

    def __eq__(self, other):
        return isinstance(other, ExperimentConfig) and self.values == other.values

    def __hash__(self):
        return hash(tuple(sorted((k, repr(v)) for k, v in self.values.items())))

    def get(self, dotted):
        return self.values[dotted]

    @property
    def seed(self):
        return self.values["experiment.seed"]

    @property
    def epochs(self):
        return self.values["experiment.epochs"]

    @property
    def output_dir(self):
        return self.values["experiment.output_dir"]

    @property
    def metric_t(self):
        return self.values["metrics.t"]

    def section(self, name):
        prefix = name + "."
        return {k[len(prefix):]: v for k, v in self.values.items() if k.startswith(prefix)}

    def dataset_spec(self) -> SyntheticDatasetSpec:
        d = self.section("dataset")
        return SyntheticDatasetSpec(
            n_classes=d["n_classes"], n_per_class=d["n_per_class"], dim=d["dim"],
            cluster_spread=d["cluster_spread"], noise_aug=d["noise_aug"],
            mask_prob=d["mask_prob"], scale_range=d["scale_range"],
            test_fraction=d["test_fraction"], seed=d["seed"],
        )

    def audio_config(self) -> AudioConfig:
        return AudioConfig(**self.section("audio"))

    def augmentation(self) -> AugmentationConfig:
        return AugmentationConfig(**self.section("augment"), seed=self.seed)

    def replace(self, **dotted):
        """Copy with some dotted keys overridden (re-validated)."""
        values = dict(self.values)
        for k, v in dotted.items():
            key = k.replace("__", ".")
            if key not in values:
                raise ConfigError("unknown key", field=key)
            values[key] = v
        return build_config(values, self.sources)


def _line_index(text):
    """Map 'section.key' and 'section' to 1-based line numbers."""
    where = {}
    section = None
    for n, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        m = re.fullmatch(r"\[([^\]]*)\]", line)
        if m:
            section = m.group(1).strip()
            where.setdefault(section, n)
            continue
        m = re.match(r"([^=:]+)[=:]", line)
        if m and section is not None:
            where.setdefault(f"{section}.{m.group(1).strip().lower()}", n)
    return where


def parse_config(text: str, source="<config>") -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=source)
    except configparser.DuplicateOptionError as exc:
        raise ConfigError("duplicate key", field=f"{exc.section}.{exc.option}", line=exc.lineno) from exc
    except configparser.DuplicateSectionError as exc:
        raise ConfigError("duplicate section", field=exc.section, line=exc.lineno) from exc
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError("key outside of any [section]", line=exc.lineno) from exc
    except configparser.ParsingError as exc:
        line = exc.errors[0][0] if exc.errors else None
        raise ConfigError("cannot parse line", line=line) from exc
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc

    lines = _line_index(text)
    values = {}
    for section in parser.sections():
        if section not in SCHEMA:
            raise ConfigError("unknown section", field=section, line=lines.get(section))
        for key in parser[section]:
            if key not in SCHEMA[section]:
                raise ConfigError("unknown key", field=f"{section}.{key}", line=lines.get(f"{section}.{key}"))
    for section, keys in SCHEMA.items():
        for key, (parse, default) in keys.items():
            dotted = f"{section}.{key}"
            if parser.has_option(section, key):
                raw = parser.get(section, key)
                try:
                    values[dotted] = parse(raw)
                except (TypeError, ValueError) as exc:
                    raise ConfigError(f"invalid value {raw!r}: {exc}", field=dotted,
                                      line=lines.get(dotted)) from exc
            elif default is REQUIRED:
                raise ConfigError("missing required key", field=dotted, line=lines.get(section))
            else:
                values[dotted] = default
    return build_config(values, lines)


def build_config(values, sources=None) -> ExperimentConfig:
    lines = sources or {}

    def fail(msg, key):
        raise ConfigError(msg, field=key, line=lines.get(key))

    try:
        loss = LossConfig(tau=values["loss.tau"], m_g=values["loss.m_g"], alpha=values["loss.alpha"])
    except ValueError as exc:
        key = next(k for k in ("loss.tau", "loss.m_g", "loss.alpha") if k.split(".")[1] in str(exc))
        fail(str(exc), key)
    positive = ["experiment.epochs", "experiment.probe_every", "encoder.d_h", "encoder.d_z",
                "encoder.head_hidden", "optimizer.batch_size", "probe.epochs"]
    for key in positive:
        if values[key] < 1:
            fail("must be >= 1", key)
    if any(w < 1 for w in values["encoder.hidden"]):
        fail("hidden widths must be >= 1", "encoder.hidden")
    if values["optimizer.lr"] < 0:
        fail("must be >= 0", "optimizer.lr")
    if values["probe.lr"] <= 0:
        fail("must be > 0", "probe.lr")
    if values["metrics.t"] <= 0:
        fail("must be > 0", "metrics.t")
    if values["dataset.kind"] in ("audio", "csv") and not values["dataset.path"]:
        fail(f"required when dataset.kind = {values['dataset.kind']}", "dataset.path")
    cfg = ExperimentConfig(values["experiment.mode"], loss, dict(values), lines)
    for build, section in ((cfg.dataset_spec, "dataset"), (cfg.audio_config, "audio"),
                           (cfg.augmentation, "augment")):
        try:
            build()
        except (TypeError, ValueError) as exc:
            key = next((k for k in values if k.startswith(section + ".") and k.split(".")[1] in str(exc)),
                       section)
            fail(str(exc), key)
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except (OSError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, source=str(path))


def _render(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ", ".join(_render(x) for x in v)
    return str(v)


def config_to_text(cfg: ExperimentConfig) -> str:
    """Full config echo; ``parse_config(config_to_text(c)) == c``."""
    out = []
    for section, keys in SCHEMA.items():
        out.append(f"[{section}]")
        for key in keys:
            out.append(f"{key} = {_render(cfg.values[f'{section}.{key}'])}")
        out.append("")
    return "\n".join(out)


def with_overrides(cfg: ExperimentConfig, seed=None, output_dir=None) -> ExperimentConfig:
    kw = {}
    if seed is not None:
        kw["experiment__seed"] = int(seed)
    if output_dir is not None:
        kw["experiment__output_dir"] = str(output_dir)
    return cfg.replace(**kw) if kw else cfg


__all__ = ["ExperimentConfig", "parse_config", "load_config", "config_to_text", "build_config",
           "with_overrides", "SCHEMA", "ARTIFACT_CHOICES"]
