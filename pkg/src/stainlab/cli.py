"""``stainlab`` command line: synth, curate, generate, train, infer, eval, wsi.

Every command takes ``--config`` (TOML), ``--set key.path=value``
overrides, ``--seed``, ``--workers`` and ``--out``, writes
``resolved_config.json`` into its output directory, and exits 0 on success,
2 on configuration errors, 3 on data errors and 4 on numerical errors.
Failures print one JSON error record to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from stainlab.config import RunConfig, load_config, write_snapshot
from stainlab.errors import ArgumentError, MissingInputError, StainlabError
from stainlab.imagedata import (
    ImagePatch,
    Manifest,
    Magnification,
    PatchEntry,
    PatchStore,
    SyntheticCorpusConfig,
    load_patch,
    load_patches,
    patch_manifest,
    read_manifest,
    save_patch,
    synth_corpus,
    write_manifest,
)

log = logging.getLogger("stainlab")


def _require(path: str | Path | None, what: str) -> Path:
    if path is None:
        raise MissingInputError(f"missing required input: {what}")
    p = Path(path)
    if not p.exists():
        raise MissingInputError(f"{what} not found: {p}")
    return p


def _emit(obj: dict) -> None:
    print(json.dumps(obj, sort_keys=True))


def _progress(label: str):
    def report(done: int, total: int) -> None:
        print(f"{label}: {done} / {total}", file=sys.stderr, flush=True)
    return report


def _stain_matrix(cfg: RunConfig):
    from stainlab.stain import RUIFROK_HE, StainMatrix

    if cfg.corpus.stain == "custom":
        if cfg.corpus.stain_vectors is None:
            raise ArgumentError("corpus.stain = 'custom' needs corpus.stain_vectors")
        return StainMatrix(np.asarray(cfg.corpus.stain_vectors, dtype=np.float64))
    return RUIFROK_HE


def _schedule(cfg: RunConfig):
    from stainlab.diffusion import make_schedule
    from stainlab.training import default_schedule

    s = cfg.schedule
    if s.beta_start is None and s.beta_end is None:
        return default_schedule(s.T)
    base = default_schedule(s.T)
    return make_schedule(s.T, "linear", s.beta_start if s.beta_start is not None else float(base.beta[0]),
                         s.beta_end if s.beta_end is not None else float(base.beta[-1]))


# --------------------------------------------------------------------------
# commands


def cmd_synth(args, cfg: RunConfig, out: Path) -> dict:
    c = cfg.corpus
    sc = SyntheticCorpusConfig(c.n_patches, c.side, _stain_matrix(cfg), texture_seed=cfg.seed,
                               stain_jitter_deg=c.stain_jitter_deg, intensity_jitter=c.intensity_jitter,
                               magnification=Magnification(c.magnification), name=c.name)
    store = PatchStore()
    manifest = patch_manifest(c.name, synth_corpus(sc), store, cfg.seed, {"corpus": c.model_dump(mode="json")})
    path = write_manifest(manifest, out / "corpus.json")
    return {"manifest": str(path), "n_patches": len(manifest.patches()), "store": str(store.root)}


def cmd_curate(args, cfg: RunConfig, out: Path) -> dict:
    from stainlab.curation import build_plan

    corpus_manifest = read_manifest(_require(args.corpus, "corpus manifest"))
    store = PatchStore()
    corpus = load_patches(corpus_manifest, store)
    c = cfg.curation
    plan = build_plan(corpus, c.n_targets, c.n_sources, c.exclude_list, cfg.seed, c.n_feature_clusters)
    chosen = set(plan.source_ids) | set(plan.target_ids)
    entries = [e for e in corpus_manifest.patches() if e.id in chosen]
    manifest = Manifest(corpus_manifest.corpus_name, entries, cfg.seed, {"curation": c.model_dump(mode="json")},
                        plan=plan.to_dict())
    path = write_manifest(manifest, out / "plan.json")
    return {"manifest": str(path), "n_sources": len(plan.source_ids), "n_targets": len(plan.target_ids)}


def cmd_generate(args, cfg: RunConfig, out: Path) -> dict:
    from stainlab.curation import CurationPlan
    from stainlab.nst import NstConfig, generate_transferred_set

    plan_manifest = read_manifest(_require(args.plan, "plan manifest"))
    if plan_manifest.plan is None:
        raise ArgumentError(f"{args.plan} carries no curation plan")
    plan = CurationPlan.from_dict(plan_manifest.plan)
    store = PatchStore()
    patches = {p.id: p for p in load_patches(plan_manifest, store)}
    n = cfg.nst
    nst_cfg = NstConfig(n.alpha, n.gamma, n.n_iters, n.lr, n.precision_mode)
    manifest = generate_transferred_set(plan, patches, store, config=nst_cfg, batch=n.batch,
                                        corpus_name=plan_manifest.corpus_name, seed=cfg.seed,
                                        progress=_progress("triads"))
    # keep the source/target entries so later stages can find their pixels
    manifest.records = plan_manifest.patches() + manifest.records
    path = write_manifest(manifest, out / "triads.json")
    return {"manifest": str(path), "n_triads": len(manifest.triads())}


def _triad_patches(manifest: Manifest, store: PatchStore):
    entries = {e.id: e for e in manifest.patches()}
    cache: dict[str, ImagePatch] = {}

    def get(pid: str) -> ImagePatch:
        if pid not in cache:
            cache[pid] = load_patch(store.root / entries[pid].path) if pid in entries else store.get(pid)
        return cache[pid]

    triads = manifest.triads()
    if not triads:
        raise ArgumentError("manifest lists no triads")
    src = [get(t.source_id) for t in triads]
    tgt = [get(t.target_id) for t in triads]
    out = [get(t.transferred_id) for t in triads]
    return src, tgt, out, list(cache.values())


def cmd_train(args, cfg: RunConfig, out: Path) -> dict:
    import torch

    from stainlab.autoencoder import AutoencoderConfig, train_autoencoder
    from stainlab.denoiser import DenoiserBundle, DenoiserConfig
    from stainlab.training import TrainConfig, TriadTensors, save_checkpoint, train

    manifest = read_manifest(_require(args.triads, "triad manifest"))
    src, tgt, uu, unique = _triad_patches(manifest, PatchStore())
    m, t = cfg.model, cfg.train
    ae = train_autoencoder(unique, AutoencoderConfig(m.downsample_factor, m.latent_channels, m.ae_epochs,
                                                     lr=m.ae_lr, seed=cfg.seed))
    bundle = DenoiserBundle(ae, DenoiserConfig(tuple(m.widths), m.d_tau, m.d_attn, control_mode=m.control_mode),
                            seed=cfg.seed)
    schedule = _schedule(cfg)
    tc = TrainConfig(lr=t.lr, weight_decay=t.weight_decay, epochs=t.epochs, batch=t.batch,
                     decoder_frozen=t.decoder_frozen, seed=cfg.seed, sample_every=t.sample_every,
                     sample_steps=t.sample_steps, lr_schedule=t.lr_schedule, min_lr_ratio=t.min_lr_ratio)
    data = TriadTensors.from_patches(src, tgt, uu)
    validation = data.take(slice(0, 1)) if t.sample_every else None
    bundle, records = train(bundle, data, schedule, tc, out_dir=out, validation=validation,
                            max_seconds=t.max_seconds)
    path = save_checkpoint(out / "model.pt", bundle, None, tc, schedule, t.epochs, len(records),
                           torch.Generator().manual_seed(cfg.seed))
    return {"checkpoint": str(path), "steps": len(records),
            "final_loss": records[-1]["loss"] if records else None,
            "trainable_parameters": bundle.count_trainable()}


def cmd_infer(args, cfg: RunConfig, out: Path) -> dict:
    from stainlab.training import infer, load_checkpoint

    ck = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    source = load_patch(_require(args.source, "source image"))
    target = load_patch(_require(args.target, "target image"))
    n_steps = args.steps if args.steps is not None else cfg.eval.n_steps
    result = infer(ck["bundle"], ck["schedule"], source, target, n_steps, cfg.seed)
    path = save_patch(result, out / (args.name or f"{Path(args.source).stem}__{Path(args.target).stem}.png"))
    return {"output": str(path), "n_steps": n_steps}


def cmd_eval(args, cfg: RunConfig, out: Path) -> dict:
    from stainlab.metrics import evaluate_pairs, format_mean_std

    outputs = _require(args.outputs, "outputs directory")
    refs = _require(args.references, "references directory")
    names = sorted({p.name for p in outputs.glob("*.png")} & {p.name for p in refs.glob("*.png")})
    if not names:
        raise MissingInputError("no PNG file names shared by the outputs and references directories")
    summary = evaluate_pairs([load_patch(outputs / n) for n in names], [load_patch(refs / n) for n in names])
    report = {"n_pairs": len(names), "metrics": summary,
              "formatted": {k: format_mean_std(v) for k, v in summary.items() if isinstance(v, dict)}}
    path = out / "report.json"
    path.write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return {"report": str(path), **report["formatted"], "fid": summary["fid"]}


def cmd_wsi(args, cfg: RunConfig, out: Path) -> dict:
    from stainlab.imagedata import synth_patch
    from stainlab.wsi import load_slide, run_slide, save_slide, synth_slide

    w = cfg.wsi
    normalizer = args.normalizer or w.normalizer
    if args.slide is not None:
        slide = load_slide(_require(args.slide, "slide image"))
    else:
        slide = synth_slide(args.synth_side, _stain_matrix(cfg), seed=cfg.seed)
    if args.target is not None:
        target = load_patch(_require(args.target, "target image"))
    else:
        sc = SyntheticCorpusConfig(1, cfg.corpus.side, _stain_matrix(cfg), texture_seed=cfg.seed + 1,
                                   stain_jitter_deg=cfg.corpus.stain_jitter_deg)
        target = synth_patch(sc, 0)
    bundle = schedule = None
    if normalizer == "stainfuser" and args.checkpoint is not None:
        from stainlab.training import load_checkpoint

        ck = load_checkpoint(_require(args.checkpoint, "checkpoint"))
        bundle, schedule = ck["bundle"], ck["schedule"]
    run = run_slide(slide, target, normalizer, w.batch, w.n_steps, bundle, schedule, cfg.seed, w.tile_side,
                    w.mask_downsample, w.min_tissue_fraction, cfg.workers or 1, progress=_progress("tiles"))
    slide_path = save_slide(run.output, out / "normalized.png")
    (out / "seams.json").write_text(run.report.to_json() + "\n")
    summary = {"normalizer": normalizer, "output": str(slide_path), **run.summary()}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary


COMMANDS = {
    "synth": cmd_synth,
    "curate": cmd_curate,
    "generate": cmd_generate,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "wsi": cmd_wsi,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config value, e.g. train.epochs=5 (repeatable)")
    common.add_argument("--seed", type=int, help="global seed (overrides the config)")
    common.add_argument("--workers", type=int, help="worker threads (default: available cores)")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="stainlab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="write a synthetic corpus and its manifest")
    p = sub.add_parser("curate", parents=[common], help="pick source and target sets")
    p.add_argument("--corpus", required=True, help="corpus manifest")
    p = sub.add_parser("generate", parents=[common], help="style-transfer every source/target pair")
    p.add_argument("--plan", required=True, help="plan manifest from 'curate'")
    p = sub.add_parser("train", parents=[common], help="train the autoencoder and the denoiser")
    p.add_argument("--triads", required=True, help="triad manifest from 'generate'")
    p = sub.add_parser("infer", parents=[common], help="normalize one source towards one target")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--name", help="output file name")
    p = sub.add_parser("eval", parents=[common], help="score outputs against references")
    p.add_argument("--outputs", required=True)
    p.add_argument("--references", required=True)
    p = sub.add_parser("wsi", parents=[common], help="normalize a slide tile by tile")
    p.add_argument("--slide", help="slide PNG (default: a synthetic slide)")
    p.add_argument("--synth-side", type=int, default=2048)
    p.add_argument("--target", help="target patch PNG (default: a synthetic patch)")
    p.add_argument("--normalizer", choices=["identity", "reinhard", "ruifrok", "macenko", "vahadane", "stainfuser"])
    p.add_argument("--checkpoint", help="trained model for the stainfuser normalizer")
    return parser


def _error_record(exc: BaseException, code: int) -> str:
    return json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": code})


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides, args.seed, args.workers)
        workers = cfg.workers or os.cpu_count() or 1
        import torch

        torch.set_num_threads(workers)
        cfg = cfg.model_copy(update={"workers": workers})
        out = Path(args.out)
        write_snapshot(cfg, out, args.command)
        result = COMMANDS[args.command](args, cfg, out)
    except StainlabError as exc:
        print(_error_record(exc, exc.exit_code), file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(_error_record(exc, 3), file=sys.stderr)
        return 3
    _emit(result)
    return 0


if __name__ == "__main__":
    sys.exit(main())
