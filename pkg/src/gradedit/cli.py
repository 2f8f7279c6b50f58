"""``gradedit`` command-line interface.

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""

import argparse
import json
import sys
import time
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path

import torch

from . import __version__
from .attacks import AdversarialResult, iterative_attack, save_adversarial
from .config import DEFAULT_CONFIG, GAN_VARIANTS, load_run_config
from .errors import ConfigError, GradEditError
from .evaluation import (
    TransferReport,
    asr,
    clean_accuracies,
    fps_benchmark,
    generator_crafter,
    iterative_crafter,
    plot_report,
    transfer_matrix,
    write_report,
)
from .gan import (
    build_discriminator,
    build_generator,
    generate_adversarial,
    load_generator,
    save_generator,
    train_advgan_baseline,
    train_ge_advgan,
    variant_name,
)
from .oracles import METHODS, make_oracle
from .tensorio import load_tensor
from .zoo import (
    build_model,
    load_batch,
    load_checkpoint,
    make_synthetic_dataset,
    predict,
    save_checkpoint,
    train_classifier,
)

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def _log(msg):
    print(msg, flush=True)


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _write_json(path, doc):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


# ---------------------------------------------------------------------------
# Shared steps
# ---------------------------------------------------------------------------


def _load_config(args):
    overrides = {}
    budget = {}
    if getattr(args, "epsilon", None) is not None:
        budget["epsilon"] = args.epsilon
    if getattr(args, "iterations", None) is not None:
        budget["iterations"] = args.iterations
    if budget:
        overrides["budget"] = budget
    method = getattr(args, "method", None)
    if method is not None and method in METHODS:
        overrides["oracle"] = {"method": method}
    if getattr(args, "arch_victims", None):
        overrides["models"] = {"victims": list(args.arch_victims)}
    cfg = load_run_config(args.config, getattr(args, "seed", None), overrides=overrides)
    if cfg.budget.step_alpha > cfg.budget.epsilon:
        raise ConfigError("budget.step_alpha exceeds budget.epsilon")
    _log(f"config-hash: {cfg.hash()}")
    return cfg


def _datasets(cfg):
    train, test = make_synthetic_dataset(cfg.dataset)
    return train, test.subset(slice(0, cfg.eval.num_eval))


def _model_seed(cfg, arch):
    return cfg.seed + cfg.models.archs.index(arch)


def _train_zoo(cfg, train, test, out_dir):
    models, metrics = {}, {}
    for arch in cfg.models.archs:
        model = build_model(arch, cfg.dataset.num_classes, cfg.dataset.image_size, _model_seed(cfg, arch))
        trained, m = train_classifier(model, train, test, cfg.models.train)
        save_checkpoint(trained, Path(out_dir) / arch, extra={"metrics": m})
        models[arch], metrics[arch] = trained, m
        _log(f"{arch}: test accuracy {m['test_accuracy']:.4f} ({trained.param_count} params)")
    return models, metrics


def _train_generator(cfg, surrogate, train, variant):
    gcfg = cfg.gan_config(variant)
    shape = tuple(train.data.shape[1:])
    G = build_generator(shape, gcfg.seed, gcfg.epsilon)
    D = build_discriminator(shape, gcfg.seed)
    trainer = train_advgan_baseline if variant == "baseline" else train_ge_advgan
    G, _, history = trainer(G, D, surrogate, train, gcfg)
    return G, gcfg, history


def _sidecar(cfg, **extra):
    return {"config_hash": cfg.hash(), "dataset": asdict(cfg.dataset), "seed": cfg.seed, **extra}


def _resolve_method(args, cfg):
    return args.method if args.method is not None else cfg.oracle.method


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_zoo_train(args):
    cfg = _load_config(args)
    train, test = make_synthetic_dataset(cfg.dataset)
    out = Path(args.out)
    _, metrics = _train_zoo(cfg, train, test, out)
    _write_json(out / "metrics.json", {"config_hash": cfg.hash(), "config": cfg.to_dict(), "metrics": metrics})
    return EXIT_OK


def cmd_attack(args):
    cfg = _load_config(args)
    method = _resolve_method(args, cfg)
    if method not in METHODS:
        raise ConfigError(f"--method must be one of {METHODS}")
    surrogate = load_checkpoint(args.surrogate)
    _, test = _datasets(cfg)
    oracle = make_oracle(cfg.oracle_config(method), surrogate)
    result = iterative_attack(surrogate, test.data, test.labels, oracle, cfg.budget)
    rate = result.success.float().mean().item()
    save_adversarial(result, Path(args.out) / method, _sidecar(
        cfg, method=method, surrogate=surrogate.arch_id, surrogate_path=str(args.surrogate),
        oracle=asdict(cfg.oracle_config(method)), budget=asdict(cfg.budget), num_images=len(test)))
    _log(f"{method}: surrogate ASR {rate:.4f} on {len(test)} images")
    return EXIT_OK


def cmd_gan_train(args):
    cfg = _load_config(args)
    variant = args.method if args.method is not None else "fsps"
    if variant not in GAN_VARIANTS:
        raise ConfigError(f"--method must be one of {GAN_VARIANTS}")
    surrogate = load_checkpoint(args.surrogate)
    train, test = _datasets(cfg)
    G, gcfg, history = _train_generator(cfg, surrogate, train, variant)
    rate = generate_adversarial(G, test.data, surrogate=surrogate).success.float().mean().item()
    save_generator(G, args.out, gcfg, variant, extra={
        "config_hash": cfg.hash(), "history": history, "surrogate": surrogate.arch_id, "surrogate_asr": rate})
    _log(f"{variant_name(variant)}: surrogate ASR {rate:.4f}; generator has {G.param_count} params")
    return EXIT_OK


def cmd_gan_generate(args):
    cfg = _load_config(args)
    G, manifest = load_generator(args.generator)
    data = load_batch(args.data) if args.data else _datasets(cfg)[1]
    result = generate_adversarial(G, data.data, args.epsilon)
    save_adversarial(result, Path(args.out) / "generated", _sidecar(
        cfg, method=manifest["name"], generator_path=str(args.generator), surrogate=manifest.get("surrogate"),
        data_path=str(args.data) if args.data else None, num_images=len(data)))
    _log(f"generated {len(data)} adversarial images with {manifest['name']}")
    return EXIT_OK


def _crafted_files(paths):
    files = []
    for p in paths:
        p = Path(p)
        if p.is_dir():
            files.extend(sorted(p.glob("*.adv.getf")))
        elif p.name.endswith(".adv.getf"):
            files.append(p)
        else:
            raise ConfigError(f"{p}: expected a directory or a .adv.getf file")
    if not files:
        raise ConfigError("no crafted .adv.getf files found")
    return files


def cmd_eval_transfer(args):
    cfg = _load_config(args)
    if not args.victims:
        raise ConfigError("--victims needs at least one checkpoint")
    victims = {}
    for path in args.victims:
        model = load_checkpoint(path)
        victims[model.arch_id if model.arch_id not in victims else str(path)] = model
    _, test = _datasets(cfg)
    names, surrogates, tensors = [], [], {}
    for f in _crafted_files(args.crafted):
        meta = json.loads(f.with_name(f.name[: -len(".adv.getf")] + ".json").read_text())
        x_adv = load_tensor(f)
        x_clean = test.data[: len(x_adv)]
        if x_clean.shape != x_adv.shape:
            raise ConfigError(f"{f}: crafted tensor shape {tuple(x_adv.shape)} does not match the configured dataset")
        names.append(meta.get("method", f.stem))
        surrogates.append(meta.get("surrogate") or "unknown")
        tensors[(names[-1], surrogates[-1])] = (x_clean, x_adv)
    methods = list(dict.fromkeys(names))
    surr = list(dict.fromkeys(surrogates))
    cube = [[[None] * len(victims) for _ in surr] for _ in methods]
    for (m, s), (x_clean, x_adv) in tensors.items():
        for k, (v_name, victim) in enumerate(victims.items()):
            if v_name != s:
                cube[methods.index(m)][surr.index(s)][k] = asr(victim, x_clean, x_adv)
    report = TransferReport(methods, surr, list(victims), cube, epsilon=cfg.budget.epsilon, seed=cfg.seed,
                            metadata={"config": cfg.to_dict(), "config_hash": cfg.hash()},
                            timing={"created": _now()})
    _emit_report(report, args.out, cfg.eval.plot)
    return EXIT_OK


def _emit_report(report, out, plot=False):
    out = Path(out)
    stem = out.with_suffix("") if out.suffix in (".csv", ".json") else out
    write_report(report, stem.with_suffix(".csv"))
    write_report(report, stem.with_suffix(".json"))
    if plot and report.victims:
        plot_report(report, stem.with_suffix(".png"))
    _log(f"report written to {stem}.csv / {stem}.json")


def _fps_table(cfg, surrogate, generators, methods, data):
    bs = min(cfg.eval.fps_batch_size, len(data))
    fps = {}
    for method in methods:
        craft = iterative_crafter(cfg.oracle_config(method), cfg.budget)
        fps[method] = fps_benchmark(lambda x, y: craft(surrogate, x, y), data, cfg.eval.fps_warmup_batches,
                                    cfg.eval.fps_timed_batches, bs)
    for name, G in generators.items():
        fps[name] = fps_benchmark(lambda x, y, G=G: generate_adversarial(G, x), data, cfg.eval.fps_warmup_batches,
                                  cfg.eval.fps_timed_batches, bs)
    return fps, bs


def cmd_bench_fps(args):
    cfg = _load_config(args)
    surrogate = load_checkpoint(args.surrogate)
    generators = {}
    for path in args.generators or []:
        G, manifest = load_generator(path)
        generators[manifest["name"]] = G
    methods = [args.method] if args.method else [cfg.oracle.method]
    _, test = _datasets(cfg)
    fps, bs = _fps_table(cfg, surrogate, generators, methods, test)
    for name, value in fps.items():
        _log(f"{name}: {value:.3f} images/s")
    report = TransferReport(list(fps), [surrogate.arch_id], [], [[[]] for _ in fps], fps=fps,
                            epsilon=cfg.budget.epsilon, seed=cfg.seed,
                            metadata={"config_hash": cfg.hash(), "batch_size": bs}, timing={"created": _now()})
    _emit_report(report, args.out)
    return EXIT_OK


def run_pipeline(cfg, out_dir, log=_log):
    """Train the zoo, craft with every configured method, train generators, and write reports.

    Deterministic outputs: ``transfer.csv``, ``transfer.json`` (minus its ``timing``
    field) and ``summary.json``.  Wall-clock data goes to ``timing.json`` and ``fps.*``.
    """
    out = Path(out_dir)
    started, t0 = _now(), time.perf_counter()
    stage = {}
    train, test = _datasets(cfg)
    models, metrics = _train_zoo(cfg, train, test, out / "models")
    stage["zoo"] = time.perf_counter() - t0
    surrogate_name = cfg.models.surrogate
    surrogate = models[surrogate_name]

    generators, gan_meta = {}, {}
    for variant in cfg.eval.gan_methods:
        t = time.perf_counter()
        G, gcfg, history = _train_generator(cfg, surrogate, train, variant)
        name = variant_name(variant)
        generators[name] = G
        save_generator(G, out / "generators" / variant, gcfg, variant,
                       extra={"config_hash": cfg.hash(), "history": history, "surrogate": surrogate_name})
        gan_meta[name] = {"variant": variant, "final_losses": history[-1] if history else None}
        stage[f"gan:{variant}"] = time.perf_counter() - t
        log(f"trained {name} in {stage[f'gan:{variant}']:.1f}s")

    crafters = {m: iterative_crafter(cfg.oracle_config(m), cfg.budget) for m in cfg.eval.attack_methods}
    crafters.update({name: generator_crafter(G) for name, G in generators.items()})
    victim_names = [surrogate_name] + [v for v in cfg.models.victims if v != surrogate_name]
    t = time.perf_counter()
    report = transfer_matrix(crafters, {surrogate_name: surrogate}, {v: models[v] for v in victim_names}, test,
                             cfg.budget)
    stage["transfer"] = time.perf_counter() - t
    surrogate_asr = {m: asr(surrogate, test.data, x_adv) for (m, _), x_adv in report.crafted.items()}
    for (m, _), x_adv in report.crafted.items():
        delta = x_adv - test.data
        ok = bool(delta.abs().max().item() <= cfg.budget.epsilon + 1e-6 and x_adv.min() >= 0 and x_adv.max() <= 1)
        if not ok:
            raise GradEditError(f"{m}: crafted images violate the epsilon-ball or pixel range")
        success = predict(surrogate, x_adv) != predict(surrogate, test.data)
        save_adversarial(AdversarialResult(x_adv, delta, success), out / "crafted" / m,
                         {"method": m, "surrogate": surrogate_name, "config_hash": cfg.hash(),
                          "num_images": len(test)})
    report.metadata.update({
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "clean_accuracy": clean_accuracies(models, test),
        "surrogate_asr": surrogate_asr,
        "generator_params": {name: G.param_count for name, G in generators.items()},
        "classifier_params": {arch: m.param_count for arch, m in models.items()},
        "gan": gan_meta,
        "stationary_point_search": {"max_steps": cfg.oracle.sp_max_steps, "grad_tol": cfg.oracle.sp_grad_tol,
                                    "lr": cfg.oracle.sp_lr if cfg.oracle.sp_lr is not None else cfg.budget.step_alpha},
        "num_images": len(test),
    })

    summary = {"config_hash": cfg.hash(), "clean_accuracy": report.metadata["clean_accuracy"],
               "surrogate": surrogate_name, "surrogate_asr": surrogate_asr,
               "victim_asr": {m: {v: report.cell(m, surrogate_name, v) for v in victim_names if v != surrogate_name}
                              for m in report.methods},
               "generator_params": report.metadata["generator_params"],
               "classifier_params": report.metadata["classifier_params"]}

    fps = {}
    if generators and cfg.eval.fps_timed_batches:
        t = time.perf_counter()
        fps_methods = ["fsps"] if "fsps" in METHODS else []
        fps, bs = _fps_table(cfg, surrogate, generators, fps_methods, test)
        stage["fps"] = time.perf_counter() - t
        fps_report = TransferReport(list(fps), [surrogate_name], [], [[[]] for _ in fps], fps=fps,
                                    epsilon=cfg.budget.epsilon, seed=cfg.seed,
                                    metadata={"config_hash": cfg.hash(), "batch_size": bs})
        write_report(fps_report, out / "fps.csv")
        write_report(fps_report, out / "fps.json")

    report.timing = {"started": started, "finished": _now(), "stage_seconds": stage}
    write_report(report, out / "transfer.csv")
    write_report(report, out / "transfer.json")
    if cfg.eval.plot:
        plot_report(report, out / "transfer.png")
    _write_json(out / "summary.json", summary)
    _write_json(out / "timing.json", {**report.timing, "fps": fps, "total_seconds": time.perf_counter() - t0})
    _write_json(out / "config.json", cfg.to_dict())
    return report, summary


def cmd_repro_all(args):
    cfg = _load_config(args)
    _, summary = run_pipeline(cfg, args.out)
    for m, per_victim in summary["victim_asr"].items():
        cells = ", ".join(f"{v} {a:.3f}" for v, a in per_victim.items())
        _log(f"{m}: surrogate {summary['surrogate_asr'][m]:.3f}; {cells}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


_EPILOG = (
    "configuration defaults (override in the JSON config): gan.epochs=60, gan.change_thresholds=[20, 40], "
    "gan.d_steps=[1, 1], gan.g_steps=[2, 1], oracle.freq.num_variants=10, oracle.freq.sigma=0.7, "
    "budget.epsilon=16/255, budget.iterations=10, budget.step_alpha=1.6/255. "
    f"repro-all defaults to the shipped desk-scale config ({DEFAULT_CONFIG.name}). "
    "The GRADEDIT_SEED environment variable overrides the config seed; --seed overrides both."
)


def _common(p, config_default=None, method_help=None):
    p.add_argument("--config", type=Path, default=config_default,
                   help="JSON run config (unset: built-in defaults)")
    p.add_argument("--seed", type=int, default=None, help="run seed; overrides config and GRADEDIT_SEED")
    p.add_argument("--out", type=Path, required=True, help="output directory or report path")
    p.add_argument("--device", choices=["cpu"], default="cpu", help="compute device (cpu only)")
    if method_help:
        p.add_argument("--method", default=None, help=method_help)


def _budget_flags(p):
    p.add_argument("--epsilon", type=float, default=None,
                   help="L-inf radius in [0, 1]; unset keeps budget.epsilon (default 16/255)")
    p.add_argument("--iterations", type=int, default=None,
                   help="attack iterations K; unset keeps budget.iterations (default 10)")


def build_parser():
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="gradedit", description=__doc__.splitlines()[0], epilog=_EPILOG,
                                     formatter_class=fmt)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("zoo-train", help="train every zoo model on the synthetic dataset", epilog=_EPILOG,
                       formatter_class=fmt)
    _common(p)
    p.set_defaults(func=cmd_zoo_train)

    p = sub.add_parser("attack", help="iterative attack with one oracle", epilog=_EPILOG, formatter_class=fmt)
    _common(p, method_help=f"oracle method, one of {', '.join(METHODS)} (unset: oracle.method, default fsps)")
    p.add_argument("--surrogate", type=Path, required=True, help="surrogate checkpoint directory")
    _budget_flags(p)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("gan-train", help="train the AdvGAN baseline or a gradient-edited generator", epilog=_EPILOG,
                       formatter_class=fmt)
    _common(p, method_help="'baseline' or an oracle method for gradient editing (unset: fsps)")
    p.add_argument("--surrogate", type=Path, required=True, help="surrogate checkpoint directory")
    p.add_argument("--epsilon", type=float, default=None, help="unused by training; set gan.epsilon in the config")
    p.set_defaults(func=cmd_gan_train)

    p = sub.add_parser("gan-generate", help="fast-path generation with a trained generator", epilog=_EPILOG,
                       formatter_class=fmt)
    _common(p)
    p.add_argument("--generator", type=Path, required=True, help="generator checkpoint directory")
    p.add_argument("--data", type=Path, default=None,
                   help="saved batch prefix (<prefix>.data.getf); unset: configured test split")
    p.add_argument("--epsilon", type=float, default=None, help="rescale the generator bound; unset keeps it")
    p.set_defaults(func=cmd_gan_generate)

    p = sub.add_parser("eval-transfer", help="ASR of crafted batches on victim models", epilog=_EPILOG,
                       formatter_class=fmt)
    _common(p)
    p.add_argument("--crafted", type=Path, nargs="+", required=True, help="crafted .adv.getf files or directories")
    p.add_argument("--victims", type=Path, nargs="+", required=True, help="victim checkpoint directories")
    p.set_defaults(func=cmd_eval_transfer)

    p = sub.add_parser("bench-fps", help="crafting throughput of an iterative attack and generators",
                       epilog=_EPILOG, formatter_class=fmt)
    _common(p, method_help="iterative oracle method to time (unset: oracle.method, default fsps)")
    p.add_argument("--surrogate", type=Path, required=True, help="surrogate checkpoint directory")
    p.add_argument("--generators", type=Path, nargs="*", default=[], help="generator checkpoint directories")
    _budget_flags(p)
    p.set_defaults(func=cmd_bench_fps)

    p = sub.add_parser("repro-all", help="full desk-scale pipeline: zoo, attacks, generators, reports",
                       epilog=_EPILOG, formatter_class=fmt)
    _common(p, config_default=DEFAULT_CONFIG)
    p.add_argument("--victims", dest="arch_victims", nargs="+", default=None,
                   help="victim architectures (unset: models.victims)")
    p.set_defaults(func=cmd_repro_all)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (GradEditError, RuntimeError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
