"""Command-line surface: dataset generation, causal discovery, the
two-stage trainer, evaluation, the masked/corrupted/unguided ablation,
and the theory checks.

Exit codes: 0 success, 1 runtime failure, 2 usage error.  All commands
are deterministic given (config, seed): re-running overwrites outputs
with byte-identical files.  CGDP_THREADS caps ablation-arm parallelism.
"""

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np

from .config import dump_config, load_config, RunConfig
from .diffusion import load_noise_net, make_schedule, save_noise_net, \
    ddim_sample
from .discovery import corrupt_masks, discover_masks
from .dynamics import load_dynamics, save_dynamics
from .envs import Environment, make_env_scm, optimal_reward
from .guidance import GuidanceHook
from .rl import offline_stage, online_stage
from .scm import generate_dataset, load_dataset, save_dataset
from . import verify as verify_mod

__all__ = ["main", "cmd_gen_data", "cmd_discover", "cmd_train",
           "cmd_eval", "cmd_ablate", "cmd_verify"]

_METRIC_FIELDS = ("episode", "return", "denoise_loss", "q_loss",
                  "kl_integral", "mask_refresh_flag")


def _fmt(x):
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return f"{float(x):.9g}"


def _threads():
    try:
        return max(1, int(os.environ.get("CGDP_THREADS", "1")))
    except ValueError:
        return 1


def _resolve(out_dir, path):
    return path if os.path.isabs(path) else os.path.join(out_dir, path)


def _write_metrics(records, path):
    lines = [" ".join(_METRIC_FIELDS)]
    for rec in records:
        lines.append(" ".join(_fmt(rec[f]) for f in _METRIC_FIELDS))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def cmd_gen_data(cfg, out_dir):
    spec = cfg.env_spec()
    if spec.kind != "lin-scm":
        raise ValueError("gen-data supports the lin-scm environment only")
    scm = make_env_scm(spec)
    rng = np.random.default_rng(cfg["seed"])
    data = generate_dataset(scm, cfg["data.episodes"], cfg["data.horizon"],
                            cfg["data.behavior_noise"], rng)
    path = _resolve(out_dir, cfg["data.path"])
    save_dataset(data, path, n=spec.n, d=spec.d)
    print(f"wrote {len(data)} transitions to {path}")
    return 0


def cmd_discover(cfg, out_dir):
    data, _, _ = load_dataset(_resolve(out_dir, cfg["data.path"]))
    result = discover_masks(data, cfg.notears_config(), return_result=True)
    path = os.path.join(out_dir, "discovery.txt")
    lines = []
    for row in result.w:
        lines.append(" ".join(repr(float(v)) for v in row))
    lines.append(f"threshold {repr(float(cfg['notears.tau']))}")
    m = result.masks
    for name, arr in (("c_ss", m.c_ss), ("c_as", m.c_as),
                      ("u_sr", m.u_sr[None, :]), ("u_ar", m.u_ar[None, :])):
        lines.append(name)
        for row in np.atleast_2d(arr):
            lines.append(" ".join(_fmt(v) for v in row))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    print(f"wrote discovery result to {path}")
    return 0


def _train_once(data, cfg, guidance_on, env, r_star, seed):
    tcfg = cfg.trainer_config()
    if not guidance_on:
        tcfg = replace(tcfg, guidance=replace(tcfg.guidance, lam=0.0))
    tcfg = replace(tcfg, guidance=replace(tcfg.guidance, r_star=r_star))
    rng = np.random.default_rng(seed)
    artifacts = offline_stage(data, tcfg, rng)
    records, artifacts = online_stage(env, artifacts, tcfg, rng)
    return records, artifacts


def cmd_train(cfg, out_dir, guidance_on):
    data_path = _resolve(out_dir, cfg["data.path"])
    if not os.path.exists(data_path):
        raise FileNotFoundError(f"dataset not found: {data_path}")
    data, _, _ = load_dataset(data_path)
    spec = cfg.env_spec()
    env = Environment(spec)
    r_star = max(cfg["guidance.r_star"],
                 optimal_reward(spec, env.scm)) if spec.kind == "lin-scm" \
        else cfg["guidance.r_star"]
    records, artifacts = _train_once(data, cfg, guidance_on, env, r_star,
                                     cfg["seed"])
    _write_metrics(records, os.path.join(out_dir, "metrics.txt"))
    save_noise_net(artifacts.net, os.path.join(out_dir, "noise_net.txt"))
    if artifacts.dyn.kind == "linear":
        save_dynamics(artifacts.dyn, os.path.join(out_dir, "dynamics.txt"))
    with open(os.path.join(out_dir, "effective.cfg"), "w") as fh:
        fh.write(dump_config(cfg))
    print(f"trained {len(records)} episodes; outputs under {out_dir}")
    return 0


def cmd_eval(cfg, out_dir, guidance_on):
    net = load_noise_net(os.path.join(out_dir, "noise_net.txt"))
    dyn = load_dynamics(os.path.join(out_dir, "dynamics.txt"))
    spec = cfg.env_spec()
    env = Environment(spec)
    schedule = make_schedule(cfg["train.k_steps"], cfg["train.beta_start"],
                             cfg["train.beta_end"])
    guid = cfg.guidance_config()
    if not guidance_on:
        guid = replace(guid, lam=0.0)
    rng = np.random.default_rng(cfg["seed"])
    returns = []
    for _ in range(cfg["eval.episodes"]):
        state = env.reset(rng)
        total = 0.0
        while not state.done:
            hook = GuidanceHook(dyn, guid, schedule, state.obs)
            a = np.clip(ddim_sample(net, schedule, state.obs, rng,
                                    hook=hook), -1.0, 1.0)
            state, r, _ = env.step(a, rng)
            total += r
        returns.append(total)
    mean = float(np.mean(returns))
    std = float(np.std(returns))
    with open(os.path.join(out_dir, "eval.txt"), "w") as fh:
        fh.write(f"episodes {len(returns)}\n"
                 f"mean_return {_fmt(mean)}\nstd_return {_fmt(std)}\n")
    print(f"eval mean return {_fmt(mean)} over {len(returns)} episodes")
    return 0


def _final_return(records, tail_frac=0.1):
    tail = max(1, int(len(records) * tail_frac))
    return float(np.median([r["return"] for r in records[-tail:]]))


def cmd_ablate(cfg, out_dir):
    data_path = _resolve(out_dir, cfg["data.path"])
    if not os.path.exists(data_path):
        raise FileNotFoundError(f"dataset not found: {data_path}")
    data, _, _ = load_dataset(data_path)
    spec = cfg.env_spec()
    scm = make_env_scm(spec) if spec.kind == "lin-scm" else None
    r_star = optimal_reward(spec, scm)
    result = discover_masks(data, cfg.notears_config(), return_result=True)

    def run_arm(arm, seed):
        tcfg = cfg.trainer_config()
        masks = result.masks
        if arm == "corrupted":
            masks = corrupt_masks(result.masks, cfg["ablate.flip_prob"],
                                  np.random.default_rng(10 ** 6 + seed))
        if arm == "unguided":
            tcfg = replace(tcfg, guidance=replace(tcfg.guidance, lam=0.0))
        tcfg = replace(tcfg, guidance=replace(tcfg.guidance, r_star=r_star))
        rng = np.random.default_rng(cfg["seed"] + seed)
        env = Environment(spec, scm=scm)
        artifacts = offline_stage(data, tcfg, rng, masks=masks, w0=result.w)
        records, _ = online_stage(env, artifacts, tcfg, rng)
        return _final_return(records)

    arms = ("notears", "corrupted", "unguided")
    jobs = [(arm, seed) for arm in arms
            for seed in range(cfg["ablate.seeds"])]
    with ThreadPoolExecutor(max_workers=_threads()) as pool:
        results = list(pool.map(lambda job: run_arm(*job), jobs))
    per_arm = {arm: [] for arm in arms}
    for (arm, _), value in zip(jobs, results):
        per_arm[arm].append(value)
    path = os.path.join(out_dir, "ablation.csv")
    with open(path, "w") as fh:
        fh.write("arm,mean,std\n")
        for arm in arms:
            vals = per_arm[arm]
            fh.write(f"{arm},{_fmt(np.mean(vals))},{_fmt(np.std(vals))}\n")
    print(f"wrote ablation table to {path}")
    return 0


def _verify_lemma1(cfg, out_dir):
    rng = np.random.default_rng(cfg["seed"])
    d, p = 2, 4  # 2-D action; 3-D next state stacked with the reward
    m = rng.standard_normal((p, d))
    spec = verify_mod.PosteriorSpec(
        mu_bar=np.zeros(d), sigma_bar=np.eye(d), m=m,
        sigma_y=0.5 * np.eye(p), y=rng.standard_normal(p))
    schedule = make_schedule(cfg["verify.k_steps"])
    report = verify_mod.check_lemma1(spec, schedule, cfg["verify.samples"],
                                     rng, lam=1.0)
    with open(os.path.join(out_dir, "lemma1.csv"), "w") as fh:
        fh.write("coord,sample_mean,target_mean,mean_err,se\n")
        for i in range(d):
            fh.write(f"{i},{_fmt(report['sample_mean'][i])},"
                     f"{_fmt(report['target_mean'][i])},"
                     f"{_fmt(report['mean_err'][i])},"
                     f"{_fmt(report['se'][i])}\n")
        fh.write(f"cov_rel_err,{_fmt(report['cov_rel_err'])},,,\n")
    return report["passed"], f"cov_rel_err {_fmt(report['cov_rel_err'])}"


def _verify_prop2(cfg, out_dir):
    _, dyn = verify_mod.default_linear_instance(n=3, d=2,
                                                seed=cfg["seed"])
    rows = []
    for seed in range(min(cfg["verify.seeds"], 10)):
        rng = np.random.default_rng(cfg["seed"] + seed)
        s = rng.standard_normal(dyn.n)
        a = rng.uniform(-1, 1, size=dyn.d)
        report = verify_mod.check_prop2(dyn, s, a, 10 ** 4, rng)
        rows.append((seed, report["cosine"], report["passed"]))
    with open(os.path.join(out_dir, "prop2.csv"), "w") as fh:
        fh.write("seed,cosine,passed\n")
        for seed, cosine, ok in rows:
            fh.write(f"{seed},{_fmt(cosine)},{int(ok)}\n")
    passed = all(ok for _, _, ok in rows)
    worst = min(c for _, c, _ in rows)
    return passed, f"min cosine {_fmt(worst)}"


def _verify_theorem1(cfg, out_dir):
    ckpt = cfg["verify.dynamics"]
    if ckpt:
        dyn = load_dynamics(ckpt)
        scm = make_env_scm(cfg.env_spec())
    else:
        scm, dyn = verify_mod.default_linear_instance(seed=cfg["seed"])
    schedule = make_schedule(cfg["train.k_steps"], cfg["train.beta_start"],
                             cfg["train.beta_end"])
    report = verify_mod.check_theorem1(
        scm, dyn, schedule, seeds=range(cfg["verify.seeds"]),
        lam=cfg["verify.lambda"], gamma_disc=cfg["train.gamma_disc"])
    with open(os.path.join(out_dir, "theorem1.csv"), "w") as fh:
        fh.write("seed,kl,bound,gap,holds\n")
        for row in report["rows"]:
            fh.write(f"{row['seed']},{_fmt(row['kl'])},"
                     f"{_fmt(row['bound'])},{_fmt(row['gap'])},"
                     f"{int(row['holds'])}\n")
    return report["passed"], \
        f"holds in {_fmt(report['fraction_holds'])} of seeds"


def _verify_prop1(cfg, out_dir):
    _, dyn = verify_mod.default_linear_instance(seed=cfg["seed"])
    schedule = make_schedule(cfg["train.k_steps"], cfg["train.beta_start"],
                             cfg["train.beta_end"])
    report = verify_mod.check_prop1(
        dyn, None, schedule, seeds=range(cfg["verify.seeds"]),
        stiff_dyn=verify_mod.stiff_linear_instance())
    with open(os.path.join(out_dir, "prop1.csv"), "w") as fh:
        fh.write("dt,diverged,terminal_norm\n")
        for row in report["rows"]:
            fh.write(f"{_fmt(row['dt'])},{row['diverged']},"
                     f"{_fmt(row['terminal_norm'])}\n")
    note = "skipped" if report.get("skipped") else \
        f"dt_max {_fmt(report['dt_max'])}"
    return report["passed"], note


_CHECKS = {
    "lemma1": _verify_lemma1,
    "prop1": _verify_prop1,
    "prop2": _verify_prop2,
    "theorem1": _verify_theorem1,
}


def cmd_verify(cfg, out_dir, which):
    names = list(_CHECKS) if which == "all" else [which]
    summary = []
    all_ok = True
    for name in names:
        ok, note = _CHECKS[name](cfg, out_dir)
        all_ok = all_ok and ok
        summary.append(f"{name} {'PASS' if ok else 'FAIL'} ({note})")
    with open(os.path.join(out_dir, "verify_summary.txt"), "w") as fh:
        fh.write("\n".join(summary) + "\n")
    for line in summary:
        print(line)
    return 0 if all_ok else 1


def _build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="config file path")
    common.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--guidance", choices=("on", "off"), default="on")
    parser = argparse.ArgumentParser(
        prog="cgdp",
        description="causality-guided diffusion policy laboratory")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("gen-data", "discover", "train", "eval", "ablate"):
        sub.add_parser(name, parents=[common])
    verify_p = sub.add_parser("verify", parents=[common])
    verify_p.add_argument("which", nargs="?", default="all",
                          choices=("lemma1", "prop1", "prop2", "theorem1",
                                   "all"))
    return parser


def main(argv=None):
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else RunConfig()
        if args.seed is not None:
            cfg.set("seed", args.seed)
        os.makedirs(args.out, exist_ok=True)
        guidance_on = args.guidance == "on"
        if args.command == "gen-data":
            return cmd_gen_data(cfg, args.out)
        if args.command == "discover":
            return cmd_discover(cfg, args.out)
        if args.command == "train":
            return cmd_train(cfg, args.out, guidance_on)
        if args.command == "eval":
            return cmd_eval(cfg, args.out, guidance_on)
        if args.command == "ablate":
            return cmd_ablate(cfg, args.out)
        if args.command == "verify":
            return cmd_verify(cfg, args.out, args.which)
        parser.error(f"unknown command {args.command!r}")
    except (ValueError, OSError, RuntimeError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 2


if __name__ == "__main__":
    sys.exit(main())
