"""Flat ``key = value`` run configuration with namespaced keys.

Every tunable of the pipeline appears under a dotted namespace
(``guidance.lambda``, ``train.lr``, ...).  Unknown keys are rejected at
parse time; dumping always emits every effective value, defaults
included, so load(dump(cfg)) reproduces cfg exactly.
"""

from .discovery import NotearsConfig
from .envs import EnvSpec
from .guidance import GuidanceConfig
from .rl import TrainerConfig

__all__ = ["RunConfig", "parse_config", "load_config", "dump_config",
           "CONFIG_SCHEMA"]

# key -> (type tag, default); order fixes the dump layout
CONFIG_SCHEMA = {
    "seed": ("int", 0),
    "env.kind": ("str", "lin-scm"),
    "env.n": ("int", 6),
    "env.d": ("int", 4),
    "env.horizon": ("int", 20),
    "env.n_causal_actions": ("int", 2),
    "env.noise_scale": ("float", 1.0),
    "env.reward_noise": ("float", 0.5),
    "env.goal_x": ("float", 1.0),
    "env.goal_y": ("float", 1.0),
    "env.seed": ("int", 0),
    "data.path": ("str", "dataset.txt"),
    "data.episodes": ("int", 400),
    "data.horizon": ("int", 5),
    "data.behavior_noise": ("float", 1.5),
    "train.lr": ("float", 3e-4),
    "train.eta": ("float", 3.0),
    "train.batch_size": ("int", 64),
    "train.offline_steps": ("int", 2000),
    "train.online_episodes": ("int", 200),
    "train.mask_refresh": ("int", 1000),
    "train.refresh_window": ("int", 2000),
    "train.refresh_min_action_std": ("float", 0.4),
    "train.buffer_capacity": ("int", 100000),
    "train.k_steps": ("int", 10),
    "train.beta_start": ("float", 1e-4),
    "train.beta_end": ("float", 2e-2),
    "train.hidden": ("str", "64,64"),
    "train.gamma_disc": ("float", 0.99),
    "train.rho_target": ("float", 0.005),
    "train.dyn_kind": ("str", "linear"),
    "train.dyn_mlp_steps": ("int", 2000),
    "notears.l1": ("float", 0.1),
    "notears.rho": ("float", 1.0),
    "notears.rho_growth": ("float", 10.0),
    "notears.tol": ("float", 1e-8),
    "notears.max_outer": ("int", 30),
    "notears.max_inner": ("int", 300),
    "notears.tau": ("float", 0.3),
    "guidance.lambda": ("float", 1.0),
    "guidance.gamma_t": ("float", 1.0),
    "guidance.beta_guid_t": ("float", 1.0),
    "guidance.r_star": ("float", 0.0),
    "guidance.use_r_star": ("bool", True),
    "eval.episodes": ("int", 20),
    "ablate.flip_prob": ("float", 0.25),
    "ablate.seeds": ("int", 5),
    "verify.samples": ("int", 20000),
    "verify.k_steps": ("int", 1000),
    "verify.seeds": ("int", 20),
    "verify.lambda": ("float", 1.0),
    "verify.dynamics": ("str", ""),
}


def _coerce(key, kind, raw):
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        return raw
    except ValueError:
        raise ValueError(f"bad value {raw!r} for config key {key!r}")


def _render(kind, value):
    if kind == "float":
        return repr(float(value))
    if kind == "bool":
        return "true" if value else "false"
    return str(value)


class RunConfig:
    """Validated bag of effective values plus typed sub-config builders."""

    def __init__(self, values=None):
        self.values = {k: default for k, (_, default) in
                       CONFIG_SCHEMA.items()}
        if values:
            for k, v in values.items():
                if k not in CONFIG_SCHEMA:
                    raise ValueError(f"unknown config key {k!r}")
                self.values[k] = v

    def __getitem__(self, key):
        return self.values[key]

    def set(self, key, value):
        if key not in CONFIG_SCHEMA:
            raise ValueError(f"unknown config key {key!r}")
        self.values[key] = value

    def env_spec(self):
        v = self.values
        return EnvSpec(kind=v["env.kind"], n=v["env.n"], d=v["env.d"],
                       horizon=v["env.horizon"],
                       n_causal_actions=v["env.n_causal_actions"],
                       noise_scale=v["env.noise_scale"],
                       reward_noise=v["env.reward_noise"],
                       goal=(v["env.goal_x"], v["env.goal_y"]),
                       seed=v["env.seed"])

    def notears_config(self):
        v = self.values
        return NotearsConfig(l1=v["notears.l1"], rho=v["notears.rho"],
                             rho_growth=v["notears.rho_growth"],
                             tol=v["notears.tol"],
                             max_outer=v["notears.max_outer"],
                             max_inner=v["notears.max_inner"],
                             tau=v["notears.tau"])

    def guidance_config(self):
        v = self.values
        return GuidanceConfig(lam=v["guidance.lambda"],
                              gamma_t=v["guidance.gamma_t"],
                              beta_guid_t=v["guidance.beta_guid_t"],
                              r_star=v["guidance.r_star"],
                              use_r_star=v["guidance.use_r_star"])

    def trainer_config(self):
        v = self.values
        hidden = tuple(int(w) for w in v["train.hidden"].split(",") if w)
        return TrainerConfig(
            lr=v["train.lr"], eta=v["train.eta"],
            batch_size=v["train.batch_size"],
            offline_steps=v["train.offline_steps"],
            online_episodes=v["train.online_episodes"],
            mask_refresh=v["train.mask_refresh"],
            refresh_window=v["train.refresh_window"],
            refresh_min_action_std=v["train.refresh_min_action_std"],
            buffer_capacity=v["train.buffer_capacity"],
            k_steps=v["train.k_steps"],
            beta_start=v["train.beta_start"],
            beta_end=v["train.beta_end"], hidden=hidden,
            gamma_disc=v["train.gamma_disc"],
            rho_target=v["train.rho_target"],
            dyn_kind=v["train.dyn_kind"],
            dyn_mlp_steps=v["train.dyn_mlp_steps"],
            notears=self.notears_config(),
            guidance=self.guidance_config(), seed=v["seed"])


def parse_config(text):
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in body.split("=", 1))
        if key not in CONFIG_SCHEMA:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        values[key] = _coerce(key, CONFIG_SCHEMA[key][0], raw)
    return RunConfig(values)


def load_config(path):
    with open(path) as fh:
        return parse_config(fh.read())


def dump_config(cfg):
    """All effective values, schema order, one key per line."""
    lines = []
    for key, (kind, _) in CONFIG_SCHEMA.items():
        lines.append(f"{key} = {_render(kind, cfg.values[key])}")
    return "\n".join(lines) + "\n"
