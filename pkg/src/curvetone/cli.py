"""Command-line interface: train, enhance, eval, and bench.

Machine-readable output (CSV, JSON) goes to stdout or files; progress and
warnings go to stderr. Exit codes: 0 ok, 1 per-item failures, 2 usage error.
"""

from __future__ import annotations

import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import click
import numpy as np

from . import __version__
from .imaging import ImagingError, load_image, load_manifest, save_image, to_float
from .metrics import MetricReport, psnr, ssim
from .neural import PolicyNetwork
from .neural.archive import ArchiveError, load_weights
from .pipeline import RESOLUTIONS, enhance_image, run_bench
from .reward import ProviderError, ProxyLossProvider, RemoteLossProvider
from .sac import ConfigError, SacConfig, train


def _log(message: str) -> None:
    click.echo(message, err=True)


def _load_policy(weights: Path | None, seed: int = 0) -> PolicyNetwork:
    policy = PolicyNetwork(np.random.default_rng(seed))
    if weights is not None:
        load_weights(weights, policy)
    return policy


@click.group()
@click.version_option(version=__version__)
def main():
    """Tone-curve image enhancement with an RL-trained policy and composed LUTs."""


@main.command()
@click.argument("inputs", nargs=-1, required=True, type=click.Path(path_type=Path))
@click.option("--weights", type=click.Path(exists=True, path_type=Path), required=True,
              help="Policy weight archive (.curv).")
@click.option("--out-dir", type=click.Path(path_type=Path), required=True)
@click.option("--steps", default=5, show_default=True, help="Curve adjustments per image.")
@click.option("--segments", default=64, show_default=True, help="Linear pieces per curve.")
@click.option("--trace", is_flag=True, help="Also write per-image trace JSON (actions, curves, LUT).")
@click.option("--state-crop", is_flag=True,
              help="Build states by center-cropping instead of resizing the full frame.")
@click.option("--jobs", default=min(4, os.cpu_count() or 1), show_default=True,
              help="Worker threads across input files.")
def enhance(inputs, weights, out_dir, steps, segments, trace, state_crop, jobs):
    """Enhance PNG images through the composed-LUT test-time path."""
    try:
        policy = _load_policy(weights)
    except ArchiveError as exc:
        raise click.ClickException(str(exc))
    out_dir.mkdir(parents=True, exist_ok=True)

    def process(path: Path):
        image = load_image(path)
        output, trace_record = enhance_image(image, policy, steps=steps, segments=segments,
                                             state_crop=state_crop, collect_trace=trace)
        destination = out_dir / path.name
        save_image(destination, output)
        if trace_record is not None:
            (out_dir / f"{path.stem}_trace.json").write_text(json.dumps(trace_record.to_json()))
        return destination

    failures = 0
    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        for path, result in zip(inputs, pool.map(lambda p: _guard(process, p), inputs)):
            if isinstance(result, Exception):
                failures += 1
                _log(f"error: {path}: {result}")
            else:
                _log(f"enhanced {path} -> {result}")
    if failures:
        sys.exit(1)


def _guard(fn, path):
    try:
        return fn(path)
    except (ImagingError, ArchiveError, ValueError) as exc:
        return exc


@main.command(name="train")
@click.option("--manifest", type=click.Path(exists=True, path_type=Path), required=True,
              help="JSON manifest: [{path, classes}].")
@click.option("--out-dir", type=click.Path(path_type=Path), required=True)
@click.option("--config", "config_path", type=click.Path(exists=True, path_type=Path),
              help="JSON training config; fields mirror SacConfig.")
@click.option("--reward", "reward_spec", default="proxy", show_default=True,
              help="Loss provider: 'proxy' or 'remote:URL'.")
@click.option("--seed", default=0, show_default=True)
@click.option("--resume", type=click.Path(exists=True, path_type=Path),
              help="Checkpoint directory to resume from.")
def train_cmd(manifest, out_dir, config_path, reward_spec, seed, resume):
    """Train the policy with Soft Actor-Critic."""
    try:
        config = SacConfig.from_json(json.loads(config_path.read_text())) if config_path else SacConfig()
        config.validate()
    except ConfigError as exc:
        raise click.ClickException(str(exc))

    if reward_spec == "proxy":
        provider = ProxyLossProvider()
    elif reward_spec.startswith("remote:"):
        provider = RemoteLossProvider(reward_spec.split(":", 1)[1])
        try:
            health = provider.health()
        except ProviderError as exc:
            raise click.ClickException(f"reward service health check failed: {exc}")
        _log(f"reward service healthy: {health}")
    else:
        raise click.UsageError(f"--reward must be 'proxy' or 'remote:URL', got {reward_spec!r}")

    entries = load_manifest(manifest)
    _log(f"training on {len(entries)} images, {config.total_iterations} iterations, seed {seed}")

    def progress(step, returns):
        if returns and len(returns) % 200 == 0:
            _log(f"step {step}: mean return (last 100) = {np.mean(returns[-100:]):.3f}")

    try:
        result = train(entries, config, provider, seed=seed, out_dir=out_dir,
                       resume_from=resume, progress=progress)
    except ProviderError as exc:
        raise click.ClickException(str(exc))
    final_policy = out_dir / "policy_final.curv"
    final_policy.write_bytes((result.final_checkpoint / "policy.curv").read_bytes())
    _log(f"finished at step {result.steps}; final policy: {final_policy}")


@main.command(name="eval")
@click.option("--pairs", type=click.Path(exists=True, path_type=Path), required=True,
              help="JSON manifest of {path, gt} pairs.")
@click.option("--weights", type=click.Path(exists=True, path_type=Path), required=True)
@click.option("--out", type=click.Path(path_type=Path), help="CSV destination (default stdout).")
@click.option("--steps", default=5, show_default=True)
@click.option("--segments", default=64, show_default=True)
@click.option("--state-crop", is_flag=True)
def eval_cmd(pairs, weights, out, steps, segments, state_crop):
    """Enhance inputs and score PSNR/SSIM against ground truth."""
    try:
        policy = _load_policy(weights)
    except ArchiveError as exc:
        raise click.ClickException(str(exc))
    entries = [e for e in load_manifest(pairs) if e.gt is not None]
    if not entries:
        raise click.ClickException(f"{pairs}: no records with a 'gt' field")

    paths, psnrs, ssims = [], [], []
    skipped = 0
    for entry in entries:
        try:
            image = load_image(entry.path)
            truth = to_float(load_image(entry.gt))
        except ImagingError as exc:
            _log(f"warning: skipping {entry.path}: {exc}")
            skipped += 1
            continue
        enhanced, _ = enhance_image(image, policy, steps=steps, segments=segments, state_crop=state_crop)
        candidate = to_float(enhanced)
        if candidate.data.shape != truth.data.shape:
            _log(f"warning: skipping {entry.path}: shape {candidate.data.shape} vs gt {truth.data.shape}")
            skipped += 1
            continue
        paths.append(str(entry.path))
        psnrs.append(psnr(candidate, truth))
        ssims.append(ssim(candidate, truth))

    if not paths:
        raise click.ClickException("every pair was skipped; nothing to report")
    report = MetricReport(paths=tuple(paths), psnr_values=tuple(psnrs), ssim_values=tuple(ssims))
    lines = ["path,psnr_db,ssim"]
    lines += [f"{p},{pv:.6f},{sv:.6f}" for p, pv, sv in report.csv_rows()]
    csv_text = "\n".join(lines) + "\n"
    if out is not None:
        Path(out).write_text(csv_text)
    else:
        click.echo(csv_text, nl=False)
    _log(f"scored {len(paths)} pairs ({skipped} skipped): mean PSNR {report.mean_psnr:.3f} dB, "
         f"mean SSIM {report.mean_ssim:.4f}")
    if skipped:
        sys.exit(1)


@main.command()
@click.option("--weights", type=click.Path(exists=True, path_type=Path),
              help="Policy archive; a seeded random policy is used when omitted.")
@click.option("--resolutions", default="HD,FHD,UHD", show_default=True)
@click.option("--repeat", default=100, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--steps", default=5, show_default=True)
@click.option("--segments", default=64, show_default=True)
@click.option("--json", "as_json", is_flag=True, help="Emit results as JSON.")
def bench(weights, resolutions, repeat, seed, steps, segments, as_json):
    """Time the LUT path against naive full-resolution application."""
    try:
        policy = _load_policy(weights, seed=seed)
    except ArchiveError as exc:
        raise click.ClickException(str(exc))
    names = [n.strip() for n in resolutions.split(",") if n.strip()]
    for name in names:
        if name not in RESOLUTIONS:
            raise click.UsageError(f"unknown resolution {name!r}; choose from {','.join(RESOLUTIONS)}")
    if weights is None:
        _log(f"no --weights given; benchmarking a seed-{seed} random policy")
    results = run_bench(policy, names, repeat=repeat, seed=seed, steps=steps, segments=segments)
    if as_json:
        click.echo(json.dumps([r.to_json() for r in results], indent=2))
        return
    header = f"{'res':>4} {'pixels':>10} {'state_prep':>11} {'policy+lut':>11} {'final_map':>10} {'lut_total':>10} {'naive':>10} {'speedup':>8} {'match':>6}"
    click.echo(header)
    for r in results:
        click.echo(f"{r.resolution:>4} {r.height * r.width:>10} {r.state_prep_s:>11.5f} "
                   f"{r.policy_compose_s:>11.5f} {r.final_map_s:>10.5f} {r.lut_total_s:>10.5f} "
                   f"{r.naive_total_s:>10.5f} {r.speedup:>8.2f} {str(r.outputs_match):>6}")


if __name__ == "__main__":
    main()
