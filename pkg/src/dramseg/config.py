"""Run configuration: a sectioned key-value file covering every knob.

Sections: [phantom] [proposal] [network] [train] [eval]. Every key is
optional (defaults below); unknown sections or keys are errors, not
warnings — a typo must never silently fall back to a default. The
resolved configuration can be rendered back to text (config.echo in a
run directory), and parsing that echo reproduces the exact RunConfig.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields
from pathlib import Path

from .losses import LossWeights
from .model import NetworkConfig
from .phantom import PhantomConfig
from .pipeline import TrainConfig
from .proposal import VesselnessConfig

METHODS = ("cam", "cam-p", "dcam", "dcam-p", "dram", "dram-p", "proposed")


class ConfigError(ValueError):
    """Malformed or unknown configuration input (CLI exit code 2)."""


@dataclass
class EvalConfig:
    kappa_resamples: int = 2000
    kappa_seed: int = 0

    def validate(self) -> None:
        if self.kappa_resamples < 1:
            raise ConfigError("kappa_resamples must be >= 1")


@dataclass
class RunConfig:
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    num_cases: int = 40
    first_case: int = 0
    proposal: VesselnessConfig = field(default_factory=VesselnessConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    method: str = "proposed"
    use_er: bool = False
    use_ref: bool = False
    use_at: bool = False
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {METHODS}")
        if self.num_cases < 0 or self.first_case < 0:
            raise ConfigError("num_cases and first_case must be nonnegative")
        try:
            self.phantom.validate()
            self.proposal.validate()
            self.network.validate()
            self.train.validate()
        except ValueError as e:
            raise ConfigError(str(e)) from e
        self.eval.validate()

    @property
    def base_method(self) -> str:
        return self.method[:-2] if self.method.endswith("-p") else self.method

    @property
    def intersect_candidates(self) -> bool:
        return self.method.endswith("-p")

    def resolved_flags(self) -> tuple[bool, bool, bool]:
        """(er, ref, at); the proposed method forces all three on."""
        if self.base_method == "proposed":
            return True, True, True
        return self.use_er, self.use_ref, self.use_at


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


def _parse_floats(s: str) -> tuple[float, ...]:
    try:
        return tuple(float(p) for p in s.split(","))
    except ValueError as e:
        raise ConfigError(f"not a float list: {s!r}") from e


def _parse_chunk(s: str) -> tuple[int, int, int]:
    parts = [p.strip() for p in s.split(",")]
    try:
        vals = [int(p) for p in parts]
    except ValueError as e:
        raise ConfigError(f"not an int list: {s!r}") from e
    if len(vals) == 1:
        return (vals[0],) * 3
    if len(vals) == 3:
        return tuple(vals)  # type: ignore[return-value]
    raise ConfigError("chunk_size wants one int (cubic) or three")


# section -> key -> (parse, assign); assign mutates the RunConfig in place
def _schema():
    def ph(key, conv=float):
        return lambda cfg, s: setattr(cfg.phantom, key, conv(s))

    def burden(i):
        def set_(cfg, s):
            b = list(cfg.phantom.lesion_burden)
            b[i] = float(s)
            cfg.phantom.lesion_burden = tuple(b)
        return set_

    def mix(i):
        def set_(cfg, s):
            m = list(cfg.phantom.subtype_mix)
            m[i] = float(s)
            cfg.phantom.subtype_mix = tuple(m)
        return set_

    def pr(key, conv=float):
        return lambda cfg, s: setattr(cfg.proposal, key, conv(s))

    def nw(key, conv=int):
        return lambda cfg, s: setattr(cfg.network, key, conv(s))

    def tr(key, conv=float):
        return lambda cfg, s: setattr(cfg.train, key, conv(s))

    def weight(key):
        def set_(cfg, s):
            kw = {f.name: getattr(cfg.train.weights, f.name) for f in fields(LossWeights)}
            kw[key] = float(s)
            cfg.train.weights = LossWeights(**kw)
        return set_

    return {
        "phantom": {
            "grid_size": ph("grid_size", int),
            "spacing_mm": ph("spacing_mm"),
            "num_lobes": ph("num_lobes", int),
            "lesion_burden_lo": burden(0),
            "lesion_burden_hi": burden(1),
            "mix_ggo": mix(0),
            "mix_consolidation": mix(1),
            "mix_mixed": mix(2),
            "noise_sigma": ph("noise_sigma"),
            "label_noise_prob": ph("label_noise_prob"),
            "seed": ph("seed", int),
            "num_cases": lambda cfg, s: setattr(cfg, "num_cases", int(s)),
            "first_case": lambda cfg, s: setattr(cfg, "first_case", int(s)),
        },
        "proposal": {
            "scales_mm": lambda cfg, s: setattr(cfg.proposal, "scales_mm", _parse_floats(s)),
            "alpha": pr("alpha"),
            "beta_blob": pr("beta_blob"),
            "gamma": pr("gamma"),
            "response_threshold": pr("response_threshold"),
        },
        "network": {
            "base_width": nw("base_width"),
            "depth": nw("depth"),
            "attention_dim": nw("attention_dim"),
            "chunk_size": lambda cfg, s: setattr(cfg.network, "chunk_size", _parse_chunk(s)),
        },
        "train": {
            "learning_rate": tr("learning_rate"),
            "momentum": tr("momentum"),
            "epochs": tr("epochs", int),
            "seed": tr("seed", int),
            "checkpoint_every": tr("checkpoint_every", int),
            "method": lambda cfg, s: setattr(cfg, "method", s.strip()),
            "er": lambda cfg, s: setattr(cfg, "use_er", _parse_bool(s)),
            "ref": lambda cfg, s: setattr(cfg, "use_ref", _parse_bool(s)),
            "at": lambda cfg, s: setattr(cfg, "use_at", _parse_bool(s)),
            "w_regression": weight("w_regression"),
            "w_equivariance": weight("w_equivariance"),
            "w_refinement": weight("w_refinement"),
            "bootstrap_beta": weight("bootstrap_beta"),
        },
        "eval": {
            "kappa_resamples": lambda cfg, s: setattr(cfg.eval, "kappa_resamples", int(s)),
            "kappa_seed": lambda cfg, s: setattr(cfg.eval, "kappa_seed", int(s)),
        },
    }


def parse_config_text(text: str) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError(f"config parse error: {e}") from e
    schema = _schema()
    cfg = RunConfig()
    for section in cp.sections():
        if section not in schema:
            raise ConfigError(f"unknown config section [{section}]")
        for key, value in cp.items(section):
            if key not in schema[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            try:
                schema[section][key](cfg, value)
            except ConfigError:
                raise
            except ValueError as e:
                raise ConfigError(f"bad value for [{section}] {key}: {value!r} ({e})") from e
    cfg.validate()
    return cfg


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        cfg = RunConfig()
        cfg.validate()
        return cfg
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_config_text(p.read_text())


def render_config(cfg: RunConfig) -> str:
    """Deterministic INI text of the fully resolved configuration."""
    ph, pr, nw, tr, ev = cfg.phantom, cfg.proposal, cfg.network, cfg.train, cfg.eval
    w = tr.weights
    out = io.StringIO()

    def sec(name, pairs):
        out.write(f"[{name}]\n")
        for k, v in pairs:
            out.write(f"{k} = {v}\n")
        out.write("\n")

    sec("phantom", [
        ("grid_size", ph.grid_size),
        ("spacing_mm", repr(ph.spacing_mm)),
        ("num_lobes", ph.num_lobes),
        ("lesion_burden_lo", repr(ph.lesion_burden[0])),
        ("lesion_burden_hi", repr(ph.lesion_burden[1])),
        ("mix_ggo", repr(ph.subtype_mix[0])),
        ("mix_consolidation", repr(ph.subtype_mix[1])),
        ("mix_mixed", repr(ph.subtype_mix[2])),
        ("noise_sigma", repr(ph.noise_sigma)),
        ("label_noise_prob", repr(ph.label_noise_prob)),
        ("seed", ph.seed),
        ("num_cases", cfg.num_cases),
        ("first_case", cfg.first_case),
    ])
    sec("proposal", [
        ("scales_mm", ",".join(repr(s) for s in pr.scales_mm)),
        ("alpha", repr(pr.alpha)),
        ("beta_blob", repr(pr.beta_blob)),
        ("gamma", repr(pr.gamma)),
        ("response_threshold", repr(pr.response_threshold)),
    ])
    sec("network", [
        ("base_width", nw.base_width),
        ("depth", nw.depth),
        ("attention_dim", nw.attention_dim),
        ("chunk_size", ",".join(str(c) for c in nw.chunk_size)),
    ])
    sec("train", [
        ("learning_rate", repr(tr.learning_rate)),
        ("momentum", repr(tr.momentum)),
        ("epochs", tr.epochs),
        ("seed", tr.seed),
        ("checkpoint_every", tr.checkpoint_every),
        ("method", cfg.method),
        ("er", str(cfg.use_er).lower()),
        ("ref", str(cfg.use_ref).lower()),
        ("at", str(cfg.use_at).lower()),
        ("w_regression", repr(w.w_regression)),
        ("w_equivariance", repr(w.w_equivariance)),
        ("w_refinement", repr(w.w_refinement)),
        ("bootstrap_beta", repr(w.bootstrap_beta)),
    ])
    sec("eval", [
        ("kappa_resamples", ev.kappa_resamples),
        ("kappa_seed", ev.kappa_seed),
    ])
    return out.getvalue()


def write_config_echo(cfg: RunConfig, run_dir: str | Path) -> Path:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / "config.echo"
    path.write_text(render_config(cfg))
    return path
