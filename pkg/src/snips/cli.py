"""Command line front end: degrade images, sample reconstructions, diagnose.

Verbs:

    snips degrade  --config cfg.json [overrides]   write the measurement only
    snips sample   --config cfg.json [overrides]   sample from an existing y
    snips run      --config cfg.json [overrides]   degrade + sample
    snips diagnose --config cfg.json [overrides]   metrics for existing samples

Configuration is a single JSON document; any flag overrides its field. The
``run`` verb leaves behind: the measurement (y.npy, plus degraded.png when
the measurement is itself an image), one PNG per chain, the pixelwise mean
and (4x scaled) std images, metrics.csv, and manifest.json echoing the
resolved configuration and all derived seeds, so a run can be reproduced
from its manifest alone.

Images are 8-bit PNG mapped linearly to [0,1]; all math is float64 and
quantization happens only at write time (round-half-even). RGB images are
processed channel-wise with the same operator per channel and diagnostics
are computed on the flattened residual.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from .diagnostics import psnr, residual_faithfulness, sample_vs_mean_gap
from .operators import (
    LinearOperator,
    make_block_average,
    make_inpainting_mask,
    make_random_projection,
    make_uniform_blur,
    svd_decompose,
)
from .priors import ExternalDenoiserClient, load_gaussian_prior, load_gmm_prior
from .sampler import SamplerConfig, snips_sample_many
from .schedule import make_geometric_schedule

TASKS = ("deblur", "sr", "cs", "inpaint", "denoise", "synthesize")
OUTPUT_DIR_ENV = "SNIPS_OUTPUT_DIR"


@dataclass
class ExperimentConfig:
    task: str
    input: str | None = None
    output_dir: str | None = None
    sigma0: float = 0.1
    kernel: int = 5          # deblur
    block: int = 2           # sr
    fraction: float = 0.25   # cs
    mask: list[int] = field(default_factory=list)  # inpaint, kept pixel indices
    sigma1: float = 90.0
    sigmaL: float = 0.01
    levels: int = 500
    c: float = 3.3e-2
    tau: int = 5
    chains: int = 8
    seed: int = 0
    workers: int = 1
    side: int | None = None      # synthesize without an input image
    channels: int = 1            # synthesize channel count
    prior: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.task != "synthesize" and not self.input:
            raise ValueError(f"task {self.task!r} needs an input image")
        if self.task == "synthesize" and not self.input and not self.side:
            raise ValueError("synthesize needs either an input image or --side")
        if self.task == "inpaint" and not self.mask:
            raise ValueError("inpaint needs a mask (kept pixel indices)")
        if not self.prior:
            raise ValueError("a prior is required (gaussian/gmm file or external command)")
        if self.output_dir is None:
            self.output_dir = os.environ.get(OUTPUT_DIR_ENV, "snips_out")

    def to_json_dict(self) -> dict:
        return {
            "task": self.task, "input": self.input, "output_dir": self.output_dir,
            "sigma0": self.sigma0, "kernel": self.kernel, "block": self.block,
            "fraction": self.fraction, "mask": list(self.mask),
            "sigma1": self.sigma1, "sigmaL": self.sigmaL, "levels": self.levels,
            "c": self.c, "tau": self.tau, "chains": self.chains, "seed": self.seed,
            "workers": self.workers, "side": self.side, "channels": self.channels,
            "prior": self.prior,
        }


def load_image(path) -> np.ndarray:
    """PNG to float64 in [0,1], shape (side, side, channels)."""
    img = Image.open(path)
    if img.mode not in ("L", "RGB"):
        img = img.convert("RGB" if "A" in img.mode or len(img.getbands()) > 1 else "L")
    arr = np.asarray(img, dtype=np.float64) / 255.0
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.shape[0] != arr.shape[1]:
        raise ValueError(f"need a square image, got {arr.shape[0]}x{arr.shape[1]}")
    return arr


def save_image(arr: np.ndarray, path) -> None:
    """Float image in [0,1] to 8-bit PNG; round-half-even quantization."""
    a = np.clip(np.asarray(arr, dtype=np.float64), 0.0, 1.0)
    q = np.round(a * 255.0).astype(np.uint8)
    if q.ndim == 3 and q.shape[2] == 1:
        q = q[:, :, 0]
    Image.fromarray(q).save(path)


def build_operator(cfg: ExperimentConfig, side: int, seed_seq) -> LinearOperator:
    n = side * side
    if cfg.task in ("denoise",):
        return LinearOperator(np.eye(n))
    if cfg.task == "deblur":
        return make_uniform_blur(side, cfg.kernel)
    if cfg.task == "sr":
        return make_block_average(side, cfg.block)
    if cfg.task == "cs":
        op_seed = int(seed_seq.generate_state(1)[0])
        return make_random_projection(n, cfg.fraction, op_seed)
    if cfg.task == "inpaint":
        return make_inpainting_mask(n, cfg.mask)
    if cfg.task == "synthesize":
        return LinearOperator(np.zeros((1, n)))
    raise ValueError(cfg.task)


def build_prior(cfg: ExperimentConfig, n: int):
    choice = cfg.prior
    kind = choice.get("type")
    if kind == "gaussian":
        prior = load_gaussian_prior(choice["path"])
    elif kind == "gmm":
        prior = load_gmm_prior(choice["path"])
    elif kind == "external":
        prior = ExternalDenoiserClient.spawn(list(choice["command"]), dim=n)
    else:
        raise ValueError(f"unknown prior type {kind!r}")
    if prior.dim != n:
        raise ValueError(f"prior dim {prior.dim} does not match signal dim {n}")
    return prior


def _schedule(cfg: ExperimentConfig):
    sigma0 = 0.0 if cfg.task == "synthesize" else cfg.sigma0
    return make_geometric_schedule(
        cfg.sigma1, cfg.sigmaL, cfg.levels, sigma0=sigma0, c=cfg.c, tau=cfg.tau
    )


def _seed_streams(cfg: ExperimentConfig):
    master = np.random.SeedSequence(cfg.seed)
    degrade_seq, sample_seq, op_seq = master.spawn(3)
    return degrade_seq, sample_seq, op_seq


def _y_is_image(cfg: ExperimentConfig, side: int, m: int) -> int | None:
    """Side length of the measurement if it can be shown as an image."""
    if cfg.task in ("denoise", "deblur", "inpaint") and m == side * side:
        return side
    if cfg.task == "sr":
        return side // cfg.block
    return None


def degrade(cfg: ExperimentConfig) -> dict:
    """Apply the degradation and write the measurement artifacts."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    image = load_image(cfg.input)
    side, channels = image.shape[0], image.shape[2]
    degrade_seq, _, op_seq = _seed_streams(cfg)
    op = build_operator(cfg, side, op_seq)
    rng = np.random.default_rng(degrade_seq)
    ys = []
    for ch in range(channels):
        x = image[:, :, ch].ravel()
        noise = rng.standard_normal(op.rows) if cfg.sigma0 > 0 else np.zeros(op.rows)
        ys.append(op.apply(x) + cfg.sigma0 * noise)
    y = np.stack(ys, axis=-1)  # (M, channels)
    np.save(out / "y.npy", y)
    y_side = _y_is_image(cfg, side, op.rows)
    if y_side is not None:
        save_image(y.reshape(y_side, y_side, channels), out / "degraded.png")
    return {"y": y, "op": op, "image": image, "side": side, "channels": channels}


def _metrics_rows(cfg, op, samples, y, reference):
    """CSV rows: one per sample, then the ensemble mean, then the PSNR gap."""
    rows = []
    flat_ref = reference.ravel() if reference is not None else None
    mean_img = np.mean(samples, axis=0)

    def row(name, img):
        entry = {"name": name, "psnr": ""}
        if flat_ref is not None:
            entry["psnr"] = repr(psnr(img.ravel(), flat_ref))
        if y is not None:
            resid = np.concatenate(
                [y[:, ch] - op.apply(img[:, :, ch].ravel()) for ch in range(img.shape[2])]
            )
            rep = residual_faithfulness(resid, cfg.sigma0)
            entry.update(
                residual_std=repr(rep.residual_std),
                dagostino_pvalue=repr(rep.dagostino_pvalue),
                neighbor_rho=repr(rep.neighbor_rho),
                pass_std=rep.pass_std,
                pass_normality=rep.pass_normality,
                pass_rho=rep.pass_rho,
            )
        return entry

    for idx, s in enumerate(samples):
        rows.append(row(f"sample_{idx:02d}", s))
    rows.append(row("mean", mean_img))
    if flat_ref is not None and len(samples) >= 2:
        gap = sample_vs_mean_gap([s.ravel() for s in samples], flat_ref)
        rows.append({"name": "gap_db", "psnr": repr(gap["gap_db"])})
    return rows


def _write_metrics(rows, path):
    fields = ["name", "psnr", "residual_std", "dagostino_pvalue", "neighbor_rho",
              "pass_std", "pass_normality", "pass_rho"]
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fields, restval="", lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow(r)
    Path(path).write_text(buf.getvalue())


def sample(cfg: ExperimentConfig, y: np.ndarray | None = None,
           reference: np.ndarray | None = None) -> dict:
    """Run the chains and write sample/mean/std images plus metrics."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.task == "synthesize":
        if cfg.input:
            ref = load_image(cfg.input)
            side, channels = ref.shape[0], ref.shape[2]
        else:
            side, channels = cfg.side, cfg.channels
        y = np.zeros((1, channels))
        reference = None
    else:
        if y is None:
            y = np.load(out / "y.npy")
        if reference is None and cfg.input:
            reference = load_image(cfg.input)
        side = reference.shape[0] if reference is not None else cfg.side
        if side is None:
            raise ValueError("cannot infer the image side; provide input or side")
        channels = y.shape[1]

    _, sample_seq, op_seq = _seed_streams(cfg)
    op = build_operator(cfg, side, op_seq)
    svd = svd_decompose(op)
    n = side * side
    prior = build_prior(cfg, n)
    schedule = _schedule(cfg)
    channel_seqs = sample_seq.spawn(channels)

    chains = []  # per chain: (side, side, channels)
    per_channel = []
    for ch in range(channels):
        cfg_s = SamplerConfig(schedule=schedule, seed=channel_seqs[ch])
        ens = snips_sample_many(svd, y[:, ch], prior, cfg_s, count=cfg.chains,
                                workers=cfg.workers)
        if ens.failures:
            for k, msg in ens.failures:
                print(f"chain {k} (channel {ch}) failed: {msg}", file=sys.stderr)
        per_channel.append(ens)
    counts = min(len(e.results) for e in per_channel)
    for k in range(counts):
        img = np.stack(
            [per_channel[ch].results[k].sample.reshape(side, side) for ch in range(channels)],
            axis=-1,
        )
        chains.append(img)
    if not chains:
        raise RuntimeError("no chain survived")

    samples = np.stack(chains)
    mean_img = samples.mean(axis=0)
    std_img = samples.std(axis=0)
    for idx, s in enumerate(samples):
        save_image(s, out / f"sample_{idx:02d}.png")
    save_image(mean_img, out / "mean.png")
    save_image(np.clip(std_img * 4.0, 0.0, 1.0), out / "std.png")

    rows = _metrics_rows(cfg, op, samples, None if cfg.task == "synthesize" else y,
                         reference)
    _write_metrics(rows, out / "metrics.csv")
    manifest = {
        "config": cfg.to_json_dict(),
        "seeds": {
            "master": cfg.seed,
            "channels": [f"spawn_key={s.spawn_key}" for s in channel_seqs],
        },
        "versions": {
            "snips": __version__,
            "numpy": np.__version__,
            "python": ".".join(map(str, sys.version_info[:3])),
        },
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    if hasattr(prior, "close"):
        prior.close()
    return {"samples": samples, "mean": mean_img, "std": std_img}


def run_experiment(cfg: ExperimentConfig) -> int:
    """degrade + sample; returns a process exit status."""
    if cfg.task == "synthesize":
        sample(cfg)
        return 0
    d = degrade(cfg)
    sample(cfg, y=d["y"], reference=d["image"])
    return 0


def diagnose(cfg: ExperimentConfig) -> int:
    """Recompute metrics.csv from the artifacts already in output_dir."""
    out = Path(cfg.output_dir)
    y = np.load(out / "y.npy") if (out / "y.npy").exists() else None
    reference = load_image(cfg.input) if cfg.input else None
    sample_paths = sorted(out.glob("sample_*.png"))
    if not sample_paths:
        raise FileNotFoundError(f"no sample_*.png under {out}")
    samples = np.stack([load_image(p) for p in sample_paths])
    side = samples.shape[1]
    _, _, op_seq = _seed_streams(cfg)
    op = build_operator(cfg, side, op_seq) if cfg.task != "synthesize" else None
    rows = _metrics_rows(cfg, op, samples, y, reference)
    _write_metrics(rows, out / "metrics.csv")
    print((out / "metrics.csv").read_text())
    return 0


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="snips", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="verb", required=True)
    for verb in ("degrade", "sample", "run", "diagnose"):
        sp = sub.add_parser(verb)
        sp.add_argument("--config", help="JSON config file (or a manifest.json)")
        sp.add_argument("--task", choices=TASKS)
        sp.add_argument("--input")
        sp.add_argument("--output-dir", "-o")
        sp.add_argument("--sigma0", type=float)
        sp.add_argument("--kernel", type=int)
        sp.add_argument("--block", type=int)
        sp.add_argument("--fraction", type=float)
        sp.add_argument("--mask", help="comma separated kept pixel indices")
        sp.add_argument("--sigma1", type=float)
        sp.add_argument("--sigmaL", type=float)
        sp.add_argument("--levels", type=int)
        sp.add_argument("--step-constant", dest="c", type=float)
        sp.add_argument("--tau", type=int)
        sp.add_argument("--chains", type=int)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--workers", type=int)
        sp.add_argument("--side", type=int)
        sp.add_argument("--channels", type=int)
        sp.add_argument("--prior-gaussian", metavar="NPZ")
        sp.add_argument("--prior-gmm", metavar="NPZ")
        sp.add_argument("--prior-external", metavar="CMD",
                        help="denoiser command line, shell-split")
    return p


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    doc = {}
    if args.config:
        doc = json.loads(Path(args.config).read_text())
        if "config" in doc and isinstance(doc["config"], dict):
            doc = doc["config"]  # accept a manifest as config
    for key in ("task", "input", "output_dir", "sigma0", "kernel", "block", "fraction",
                "sigma1", "sigmaL", "levels", "c", "tau", "chains", "seed", "workers",
                "side", "channels"):
        val = getattr(args, key, None)
        if val is not None:
            doc[key] = val
    if getattr(args, "mask", None):
        doc["mask"] = [int(t) for t in args.mask.split(",")]
    if getattr(args, "prior_gaussian", None):
        doc["prior"] = {"type": "gaussian", "path": args.prior_gaussian}
    elif getattr(args, "prior_gmm", None):
        doc["prior"] = {"type": "gmm", "path": args.prior_gmm}
    elif getattr(args, "prior_external", None):
        doc["prior"] = {"type": "external", "command": args.prior_external.split()}
    doc.pop("output_dir_env", None)
    return ExperimentConfig(**doc)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = load_config(args)
    except (ValueError, KeyError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    try:
        if args.verb == "degrade":
            degrade(cfg)
            return 0
        if args.verb == "sample":
            sample(cfg)
            return 0
        if args.verb == "run":
            return run_experiment(cfg)
        if args.verb == "diagnose":
            return diagnose(cfg)
    except FileNotFoundError as exc:
        print(f"missing file: {exc}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
