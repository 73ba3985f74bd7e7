"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure,
3 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import degrade, gradcheck
from .accounting import attention_flops, count_params
from .config import ConfigError, RunConfig, load_config
from .fusion import FusionConfig
from .grid import grid_from_image

log = logging.getLogger("locfuse")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_VERIFY = 0, 1, 2, 3


class UsageError(Exception):
    pass


class VerificationFailed(Exception):
    pass


def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _data(cfg: RunConfig):
    from .harness.experiment import desk_data
    from .harness.scenes import SceneConfig

    scene = SceneConfig(grid=cfg.data.grid, cell=cfg.data.cell, binary=cfg.data.binary)
    return desk_data(cfg.seed, scene, cfg.data.train_scenes, cfg.data.test_scenes)


# -- subcommands


def cmd_train(cfg: RunConfig, args) -> int:
    from .harness.io import save_checkpoint
    from .harness.model import ToyModel
    from .harness.train import train

    out = _out_dir(cfg)
    train_set, _ = _data(cfg)
    model = ToyModel(cfg.model)
    trace = train(model, train_set, cfg.train)
    # repr round-trips a float64 exactly, so equal traces give equal bytes
    _write_csv(out / "loss.csv", ("step", "loss"), ((i, repr(float(x))) for i, x in enumerate(trace)))
    meta = {"model": cfg.model.to_dict(), "train": cfg.train.to_dict(), "seed": cfg.seed}
    save_checkpoint(out / "checkpoint.bin", model.state_dict(), meta)
    print(f"wrote {out / 'loss.csv'} and {out / 'checkpoint.bin'} (final loss {trace[-1]:.4f})")
    return EXIT_OK


def _model_from_checkpoint(cfg: RunConfig, path):
    from .harness.io import FormatError, load_checkpoint
    from .harness.model import ModelConfig, ToyModel

    try:
        state, meta = load_checkpoint(path)
    except (OSError, FormatError, ValueError) as e:
        raise UsageError(f"cannot read checkpoint {path}: {e}") from None
    mcfg = cfg.model if cfg.model_given or "model" not in meta else ModelConfig(**meta["model"])
    model = ToyModel(mcfg)
    try:
        model.load_state_dict(state)
    except ValueError as e:
        raise UsageError(f"checkpoint {path} does not fit the model: {e}") from None
    return model


def cmd_eval(cfg: RunConfig, args) -> int:
    from .harness.evaluate import evaluate

    model = _model_from_checkpoint(cfg, args.checkpoint)
    _, test_set = _data(cfg)
    report = evaluate(model, test_set, fog_gray=cfg.degrade.fog_gray)
    path = _out_dir(cfg) / "report.csv"
    path.write_text(report.to_csv())
    print(report.to_csv(), end="")
    return EXIT_OK


def cmd_ablate(cfg: RunConfig, args) -> int:
    from .harness.evaluate import CSV_COLUMNS
    from .harness.experiment import canonical_mode, run_ablation

    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    try:
        for m in modes:
            canonical_mode(m)
    except ValueError as e:
        raise UsageError(str(e)) from None
    train_set, test_set = _data(cfg)
    results = run_ablation(modes, cfg.model, cfg.train, train_set, test_set)
    rows = []
    for name, res in results.items():
        for r in res.report.rows:
            rows.append([name, res.n_visual, r.condition, r.kind, r.severity, r.n, r.correct, f"{r.accuracy:.6f}"])
    _write_csv(_out_dir(cfg) / "ablation.csv", ("mode", "visual_tokens") + CSV_COLUMNS, rows)
    for name, res in results.items():
        accs = res.report.accuracies()
        print(f"{name:>10}  tokens={res.n_visual:<3} clean={accs['clean']:.3f}  "
              + " ".join(f"{k}={accs[k + '/highest']:.3f}" for k in degrade.KINDS))
    return EXIT_OK


def cmd_degrade(cfg: RunConfig, args) -> int:
    from .harness.io import FormatError, read_image, write_image

    if args.kind not in degrade.KINDS:
        raise UsageError(f"unknown degradation kind {args.kind!r}; expected one of {degrade.KINDS}")
    if args.severity not in degrade.SEVERITIES:
        raise UsageError(f"unknown severity {args.severity!r}; expected one of {degrade.SEVERITIES}")
    try:
        img = read_image(args.input)
    except (OSError, FormatError) as e:
        raise UsageError(str(e)) from None
    spec = degrade.DegradationSpec(args.kind, args.severity)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_image(out, degrade.apply(spec, img, cfg.degrade.fog_gray))
    print(f"wrote {out} ({spec}, parameter {spec.param})")
    return EXIT_OK


def bench_rows(cfg: RunConfig) -> list[tuple[str, object]]:
    b = cfg.bench
    fcfg = FusionConfig(d=b.d, radii=b.radii, d_k=b.d_k, d_v=b.d_v, ffn_mult=b.ffn_mult)
    grid = grid_from_image(b.image, b.image, b.patch)
    rep = attention_flops(fcfg, grid.n, b.text_len, b.llm_layers, b.llm_dim, grid=grid,
                          projection=b.projection, llm_ffn=b.llm_ffn, llm_vocab=b.llm_vocab)
    params = count_params(fcfg, b.projection)
    return [
        ("visual_tokens", grid.n),
        ("fusion_params", params),
        ("fusion_params_billions", f"{params / 1e9:.6f}"),
        ("fused_path_attention_flops", rep.fused_path),
        ("concat_path_attention_flops", rep.concat_path),
        ("fusion_overhead_flops", rep.fusion_overhead),
        ("base_path_flops", rep.base_path),
        ("overhead_percent", f"{100 * rep.overhead_fraction:.4f}"),
        ("visual_attention_ratio", repr(rep.ratio)),
    ]


def cmd_bench(cfg: RunConfig, args) -> int:
    rows = bench_rows(cfg)
    _write_csv(_out_dir(cfg) / "bench.csv", ("metric", "value"), rows)
    for k, v in rows:
        print(f"{k:>30}  {v}")
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    results = [("fusion_stack", r) for r in gradcheck.check_fusion_stack(seed=cfg.seed)]
    results += [(f"model[{cfg.model.mode}]", r) for r in gradcheck.check_model(cfg.model.mode, seed=cfg.seed)]
    _write_csv(_out_dir(cfg) / "gradcheck.csv", ("component", "parameter", "rel_error", "tol", "passed"),
               ((c, r.name, f"{r.rel_error:.3e}", r.tol, r.passed) for c, r in results))
    for c, r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {c}  {r.name}  {r.rel_error:.3e}")
    failed = [f"{c}:{r.name}" for c, r in results if not r.passed]
    if failed:
        raise VerificationFailed(f"gradient check failed for {', '.join(failed)}")
    return EXIT_OK


def _annotation_backends(cfg: RunConfig):
    from .annotate import loop, mock, remote

    a = cfg.annotate
    if a.backend == "mock":
        return mock.MockGenerator(cfg.seed), mock.HashScorer(), loop.argmax_selector
    try:
        client = remote.ChatClient(a.base_url, a.model, a.token_env, timeout=a.timeout)
        prompts = remote.load_prompts(a.prompts or None)
        scorer = (remote.RemoteScorer(a.scorer_url, a.token_env, timeout=a.timeout)
                  if a.scorer_url else None)
    except remote.MissingCredentials as e:
        raise UsageError(str(e)) from None
    if not a.base_url or not a.model or scorer is None:
        raise UsageError("[annotate] remote backend needs base_url, model and scorer_url")
    return remote.RemoteGenerator(client, prompts), scorer, remote.RemoteSelector(client, prompts)


def cmd_annotate(cfg: RunConfig, args) -> int:
    from .annotate.loop import AnnotationAborted, final_select, refine_loop
    from .harness.io import FormatError, read_manifest

    try:
        records = read_manifest(args.manifest)
    except (OSError, FormatError) as e:
        raise UsageError(str(e)) from None
    gen, scorer, selector = _annotation_backends(cfg)
    images = {}
    for rec in records:
        images.setdefault(rec["id"], rec["ir_path"])
    out = _out_dir(cfg)
    cand_path, final_path = out / "candidates.jsonl", out / "captions.jsonl"
    cand_path.write_text("")
    final_path.write_text("")

    def persist(state, r):
        # appended per round so an interrupted run leaves every completed round on disk
        with open(cand_path, "a") as f:
            for rec in state.records(r):
                f.write(json.dumps(rec, sort_keys=True) + "\n")

    for image_id, image in images.items():
        try:
            state = refine_loop(gen, scorer, image, cfg.annotate.rounds, cfg.annotate.fanout,
                                image_id=image_id, on_round=persist)
        except AnnotationAborted as e:
            state = e.state
            state.validate()
            raise
        state.validate()
        caption = final_select(selector, state)
        with open(final_path, "a") as f:
            f.write(json.dumps({"image_id": image_id, "caption": caption,
                                "best_score": state.best_so_far[-1]}, sort_keys=True) + "\n")
    print(f"annotated {len(images)} image(s) -> {cand_path}, {final_path}")
    return EXIT_OK


# -- parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI run configuration")
    common.add_argument("--seed", type=int, help="overrides [run] seed")
    common.add_argument("--out", help="output directory (overrides [run] out)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="locfuse", description="Local cross-attention RGB/IR fusion toolkit")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train the toy model; writes checkpoint and loss CSV")
    e = sub.add_parser("eval", parents=[common], help="13-condition report for a checkpoint")
    e.add_argument("checkpoint")
    a = sub.add_parser("ablate", parents=[common], help="train and evaluate several fusion modes")
    a.add_argument("--modes", default="dualvision,add,adaptive,concat,rgb_only,ir_only")
    d = sub.add_parser("degrade", parents=[common], help="degrade a PPM/PGM image")
    d.add_argument("input")
    d.add_argument("kind")
    d.add_argument("severity")
    d.add_argument("output")
    sub.add_parser("bench", parents=[common], help="parameter and FLOP accounting")
    sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient checks")
    n = sub.add_parser("annotate", parents=[common], help="caption refinement loop over a manifest")
    n.add_argument("manifest")
    return p


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate, "degrade": cmd_degrade,
            "bench": cmd_bench, "gradcheck": cmd_gradcheck, "annotate": cmd_annotate}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.with_seed(args.seed)
        if args.out is not None:
            cfg.out = args.out
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, UsageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except VerificationFailed as e:
        print(f"verification failed: {e}", file=sys.stderr)
        return EXIT_VERIFY
    except Exception as e:  # noqa: BLE001 - last-resort runtime boundary
        log.debug("runtime failure", exc_info=True)
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
