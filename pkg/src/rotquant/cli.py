"""Command-line surface: gen | quantize | analyze | ablate | verify.

Exit codes: 0 success, 1 validation error, 2 runtime/numerical error,
3 verify-suite failure.  Every command is deterministic given its inputs
and seed; output files are byte-identical across reruns.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from .analysis import clipping_energy, gaussian_clip_energy
from .bundle_io import (
    BundleFormatError,
    ConfigError,
    RunConfig,
    read_bundle,
    read_calibration,
    read_report,
    write_bundle,
    write_calibration,
    write_params,
    write_report,
)
from .model import (
    BlockParams,
    ModelConfig,
    QuantConfig,
    SynthSpec,
    build_toy_model,
    forward_fp,
    forward_quant,
    gen_calibration,
)
from .optim import OptimizationError
from .pipeline import (
    ABLATION_MODES,
    PipelineConfig,
    StageSchedule,
    ablate,
    mode_config,
    prepare_bundle,
    run_pipeline,
)
from .quantizers import QuantizationError, QuantSpec, quant_proxy_loss, rtn_quantize, search_clip, gptq_quantize
from .stats import channel_stats

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2
EXIT_VERIFY = 3


def _model_config(rc: RunConfig) -> ModelConfig:
    return ModelConfig(hidden=rc.hidden, heads=rc.heads, mlp_dim=rc.mlp_dim, n_blocks=rc.n_blocks)


def _synth_spec(rc: RunConfig) -> SynthSpec:
    return SynthSpec.misaligned(
        rc.hidden,
        rc.calib_sequences * rc.seq_len,
        seed=rc.seed,
        offset_std=rc.offset_std,
        base_std=rc.base_std,
        n_outliers=rc.n_outliers,
    )


def _pipeline_config(rc: RunConfig) -> PipelineConfig:
    cfg = PipelineConfig(
        qcfg=QuantConfig.for_bits(rc.w_bits, rc.a_bits, rc.kv_bits, rc.hidden // rc.heads),
        schedule=StageSchedule(
            stage1_epochs=rc.stage1_epochs,
            stage2_epochs=rc.stage2_epochs,
            steps_per_epoch=rc.steps_per_epoch,
            lr_scale=rc.lr_scale,
            lr_bias=rc.lr_bias,
            lr_clip=rc.lr_clip,
        ),
        rres_kind=rc.rres_kind,
        rres_seed=rc.seed,
        gptq_damp=rc.gptq_damp,
    )
    return mode_config(cfg, rc.mode) if rc.mode else cfg


def _load_config(args) -> RunConfig:
    rc = RunConfig.from_file(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        rc.seed = args.seed
    if getattr(args, "bits", None):
        parts = args.bits.split(",")
        if len(parts) != 3:
            raise ConfigError(f"--bits expects W,A,KV, got {args.bits!r}")
        try:
            rc.w_bits, rc.a_bits, rc.kv_bits = (int(p) for p in parts)
        except ValueError as err:
            raise ConfigError(f"--bits expects integers, got {args.bits!r}") from err
    if getattr(args, "mode", None):
        rc.mode = args.mode
    rc.validate()
    return rc


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- commands -------------------------------------------------------------------


def cmd_gen(args) -> int:
    rc = _load_config(args)
    out = _outdir(args)
    config = _model_config(rc)
    bundle = build_toy_model(config, rc.seed, outlier_columns=rc.weight_outlier_cols)
    spec = _synth_spec(rc)
    calib = gen_calibration(spec, rc.calib_sequences, rc.seq_len)
    write_bundle(out / "model.rqb", bundle)
    write_calibration(
        out / "calib.rqb",
        calib,
        synth_meta={
            "seed": spec.seed,
            "outlier_channels": list(spec.outlier_channels),
            "amplitudes": list(spec.amplitudes),
            "base_std": spec.base_std,
        },
    )
    print(f"wrote {out / 'model.rqb'} ({config.n_blocks} blocks, hidden {config.hidden})")
    print(f"wrote {out / 'calib.rqb'} ({rc.calib_sequences} x {rc.seq_len} x {config.hidden})")
    return EXIT_OK


def cmd_quantize(args) -> int:
    rc = _load_config(args)
    out = _outdir(args)
    bundle = read_bundle(args.model)
    calib = read_calibration(args.calib)
    cfg = _pipeline_config(rc)
    result = run_pipeline(bundle, calib, cfg)

    write_bundle(out / "quantized.rqb", result.bundle)
    write_params(out / "params.rqb", result.params)
    write_report(out / "report", result.report)
    for s in result.block_stats:
        print(
            f"block {s.block}: mse baseline {s.mse_baseline:.6e} "
            f"-> gptq {s.mse_after_gptq:.6e} -> final {s.mse_final:.6e}"
        )
    print(f"final calibration mse {result.final_mse:.6e}")
    print(f"wrote {out / 'quantized.rqb'}, {out / 'params.rqb'}, {out / 'report.json'}")
    return EXIT_OK


def cmd_analyze(args) -> int:
    rc = _load_config(args)
    out = _outdir(args)
    bundle = read_bundle(args.model)
    calib = read_calibration(args.calib)

    # post-rotation analysis: prepare exactly as the quantizer would, then
    # collect every quantizer-site input on the floating-point forward
    cfg = _pipeline_config(rc)
    prepared, rotation = prepare_bundle(bundle, cfg)
    calib_rot = rotation.apply(calib)
    neutral = [BlockParams.neutral(prepared.config) for _ in prepared.blocks]
    passthrough = QuantConfig(None, None, None)
    _, sites = forward_quant(prepared, neutral, passthrough, calib_rot, collect_sites=True)

    from .analysis import emit_report
    from .model import ACT_SITES

    layers = []
    for key in sorted(sites):
        if not key.endswith(".in"):
            continue
        block = int(key.split(".")[0][len("block") :])
        site = key.split(".")[1]
        weight_names = ACT_SITES.get(site)
        weight = (
            np.vstack([getattr(prepared.blocks[block], nm) for nm in weight_names])
            if weight_names
            else None
        )
        layers.append((block, site, sites[key], weight))
    bits = rc.a_bits if rc.a_bits < 16 else 4
    report = emit_report(layers, bits=bits)
    write_report(out / "analysis", report)
    worst = max(report.records, key=lambda r: r.var_of_means_fraction)
    print(
        f"analyzed {len(report.records)} sites; "
        f"max var-of-means fraction {worst.var_of_means_fraction:.3f} "
        f"at block{worst.block}.{worst.site}"
    )
    print(f"wrote {out / 'analysis.json'} (+ csv twins)")
    return EXIT_OK


def cmd_ablate(args) -> int:
    rc = _load_config(args)
    out = _outdir(args)
    bundle = read_bundle(args.model)
    calib = read_calibration(args.calib)
    cfg = _pipeline_config(rc)
    modes = [args.mode] if args.mode else list(ABLATION_MODES)
    rows = ablate(bundle, calib, cfg, modes=modes)

    import csv as _csv
    import json as _json

    with open(out / "ablation.json", "w", encoding="utf-8") as f:
        _json.dump({"schema": 1, "rows": rows}, f, sort_keys=True, separators=(",", ":"))
        f.write("\n")
    with open(out / "ablation.csv", "w", encoding="utf-8", newline="") as f:
        w = _csv.writer(f)
        w.writerow(["mode", "final_mse"])
        for row in rows:
            w.writerow([row["mode"], repr(row["final_mse"])])
    for row in rows:
        print(f"{row['mode']:>16s}  final mse {row['final_mse']:.6e}")
    return EXIT_OK


# -- verify suite ------------------------------------------------------------------


def _check_gaussian_clip_energy(corrupt):
    tol = 0.005 if not corrupt else 1e-9
    analytic = gaussian_clip_energy(2.2)
    rng = np.random.default_rng(1234)
    x = rng.standard_normal(1_000_000)
    mc = clipping_energy(x, -2.2 * x.std(), 2.2 * x.std())
    ok = abs(analytic - 0.184) <= tol and abs(mc - 0.184) <= tol
    return ok, f"analytic {analytic:.4f}, monte-carlo {mc:.4f} (target 0.184 +- {tol})"


def _check_clip_threshold(corrupt):
    lo, hi = (2.1, 2.3) if not corrupt else (2.2000, 2.2001)
    rng = np.random.default_rng(99)
    x = rng.standard_normal(1_000_000)
    theta = search_clip(x, 4) / x.std()
    return lo <= theta <= hi, f"theta* = {theta:.4f} sigma (band [{lo}, {hi}])"


def _check_variance_identity(corrupt):
    tol = 1e-10 if not corrupt else 1e-18
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(1000):
        x = rng.normal(size=(rng.integers(4, 40), rng.integers(2, 30)))
        cs = channel_stats(x)
        lhs = cs.total_var
        rhs = cs.vars.mean() + cs.var_of_means
        worst = max(worst, abs(lhs - rhs) / max(abs(lhs), 1e-300))
    return worst <= tol, f"max relative identity error {worst:.3e} (tol {tol})"


def _check_fusion_equivalence(corrupt):
    from .model import fold_norms, fuse_rres
    from .transforms import random_hadamard

    tol = 1e-6 if not corrupt else 1e-18
    worst = 0.0
    for seed in range(3):
        config = ModelConfig(hidden=32, heads=2, mlp_dim=64, n_blocks=1)
        bundle = build_toy_model(config, seed)
        rng = np.random.default_rng(seed + 50)
        x = rng.normal(size=(2, 8, 32))
        rot = random_hadamard(32, seed)
        fused = fuse_rres(fold_norms(bundle), rot)
        y_ref = rot.apply(np.asarray(forward_fp(bundle, x)))
        y_fused = np.asarray(forward_fp(fused, rot.apply(x)))
        worst = max(worst, float(np.max(np.abs(y_ref - y_fused)) / np.max(np.abs(y_ref))))
    return worst <= tol, f"max relative deviation {worst:.3e} (tol {tol})"


def _check_gptq_dominance(corrupt):
    spec = QuantSpec(4, "symmetric", "per-channel")
    margin = 0.0 if not corrupt else -1e9
    ok = True
    worst = 0.0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        w = rng.normal(size=(8, 8))
        x = rng.normal(size=(64, 8)) @ rng.normal(size=(8, 8))  # correlated
        q_g = gptq_quantize(w, x, spec)
        q_r = np.asarray(rtn_quantize(w, spec))
        diff = quant_proxy_loss(w, q_g, x) - quant_proxy_loss(w, q_r, x)
        worst = max(worst, diff)
        ok = ok and diff <= margin + 1e-12
    return ok, f"max(gptq - rtn proxy loss) = {worst:.3e} (must be <= 0)"


_CHECKS = [
    ("gaussian-clip-energy", _check_gaussian_clip_energy),
    ("clip-threshold", _check_clip_threshold),
    ("variance-identity", _check_variance_identity),
    ("fusion-equivalence", _check_fusion_equivalence),
    ("gptq-dominance", _check_gptq_dominance),
]


def cmd_verify(args) -> int:
    start = time.time()
    failures = []
    for name, fn in _CHECKS:
        ok, detail = fn(corrupt=(args.corrupt_check == name))
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
        if not ok:
            failures.append(name)
    if args.report:
        ok, detail = _check_report_file(args.report)
        print(f"{'PASS' if ok else 'FAIL'} report-file: {detail}")
        if not ok:
            failures.append("report-file")
    elapsed = time.time() - start
    if elapsed > 60:
        print(f"warning: verify took {elapsed:.1f}s (budget 60s)", file=sys.stderr)
    if failures:
        print(f"FAILED checks: {', '.join(failures)}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def _check_report_file(path):
    try:
        report = read_report(path)
    except (OSError, BundleFormatError, TypeError, ValueError) as err:
        return False, f"unparseable: {err}"
    for r in report.records:
        for field in ("clipping_energy_fraction", "var_of_means_fraction"):
            v = getattr(r, field)
            if not 0.0 <= v <= 1.0:
                return False, f"block{r.block}.{r.site}.{field} = {v} outside [0, 1]"
    return True, f"{len(report.records)} records, schema {report.schema}"


# -- entry point --------------------------------------------------------------------


def _build_parser():
    p = argparse.ArgumentParser(prog="rotquant", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, model=False, calib=False, out=True):
        sp.add_argument("--config", help="JSON run-config file")
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--bits", help="bit widths W,A,KV (>= 16 disables)")
        if model:
            sp.add_argument("--model", required=True)
        if calib:
            sp.add_argument("--calib", required=True)
        if out:
            sp.add_argument("--out", required=True, help="output directory")

    sp = sub.add_parser("gen", help="generate a toy model and synthetic calibration set")
    common(sp)
    sp.set_defaults(fn=cmd_gen)

    sp = sub.add_parser("quantize", help="run the full blockwise quantization pipeline")
    common(sp, model=True, calib=True)
    sp.set_defaults(fn=cmd_quantize)

    sp = sub.add_parser("analyze", help="emit per-site quantization error analysis")
    common(sp, model=True, calib=True)
    sp.set_defaults(fn=cmd_analyze)

    sp = sub.add_parser("ablate", help="run the feature-ladder ablation")
    common(sp, model=True, calib=True)
    sp.add_argument("--mode", choices=ABLATION_MODES, help="run a single ablation mode")
    sp.set_defaults(fn=cmd_ablate)

    sp = sub.add_parser("verify", help="run the built-in oracle suite")
    sp.add_argument("--report", help="also validate a report JSON file")
    sp.add_argument("--corrupt-check", default=None, help=argparse.SUPPRESS)
    sp.set_defaults(fn=cmd_verify)
    return p


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return EXIT_VALIDATION if err.code not in (0, None) else EXIT_OK
    try:
        return args.fn(args)
    except (ConfigError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_VALIDATION
    except (BundleFormatError, QuantizationError, OptimizationError, FileNotFoundError,
            np.linalg.LinAlgError, AssertionError, RuntimeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
