"""``rtdlab`` command line: gen-triplets, pretrain-phi, train, eval, ablate, probe, pipeline.

Exit codes: 0 success, 2 input error, 3 missing artifact, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import pipeline as pl
from .encoder import DualEncoder, VisualSurrogate, load_encoder, save_params
from .evaluation import MODES, evaluate_cir, format_report, save_gallery
from .rng import rng_stream
from .text import Vocabulary
from .training import NumericError
from .triplets import TemplateSet, TripletError, load_triplets, save_triplets

EXIT_OK, EXIT_INPUT, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4
STAGES = ("align", "phi", "triplets", "train", "eval")

log = logging.getLogger("rtdlab")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------- config + layout

def load_config(args) -> pl.RunConfig:
    values = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise CliError(EXIT_INPUT, f"config file not found: {path}")
        try:
            values.update(pl.read_config_file(path))
        except ValueError as e:
            raise CliError(EXIT_INPUT, str(e)) from None
    for item in args.set or []:
        if "=" not in item:
            raise CliError(EXIT_INPUT, f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        try:
            values[k.strip()] = pl.parse_value(k.strip(), v)
        except KeyError:
            raise CliError(EXIT_INPUT, f"unknown config key {k.strip()!r}") from None
        except ValueError as e:
            raise CliError(EXIT_INPUT, str(e)) from None
    if args.seed is not None:
        values["seed"] = args.seed
    try:
        return pl.RunConfig(**values)
    except (ValueError, TypeError) as e:
        raise CliError(EXIT_INPUT, f"invalid config: {e}") from None


@dataclasses.dataclass
class Layout:
    root: Path

    @property
    def ckpt(self) -> Path:
        return self.root / "checkpoints"

    @property
    def reports(self) -> Path:
        return self.root / "reports"

    @property
    def triplets(self) -> Path:
        return self.root / "triplets.tsv"

    @property
    def vocab(self) -> Path:
        return self.root / "vocab.txt"

    @property
    def manifest(self) -> Path:
        return self.root / "manifest"

    def make(self) -> None:
        self.ckpt.mkdir(parents=True, exist_ok=True)
        self.reports.mkdir(parents=True, exist_ok=True)

    def need(self, *paths: Path) -> None:
        for p in paths:
            if not p.exists():
                raise CliError(EXIT_MISSING, f"missing artifact: {p}")


def _manifest(layout: Layout, cfg: pl.RunConfig, extra: list[tuple[str, object]]) -> None:
    """Merge ``extra`` into the run manifest; config keys are always rewritten."""
    old = pl.read_manifest(layout.manifest) if layout.manifest.exists() else {}
    entries = dict(old)
    entries.update({f"config.{k}": pl._fmt(v) for k, v in cfg.items()})
    entries.update({k: pl._fmt(v) for k, v in extra})
    pl.write_manifest(layout.manifest, sorted(entries.items()))


# ---------------------------------------------------------------- stage helpers

def _world(cfg: pl.RunConfig, corpus=None) -> pl.World:
    return pl.build_world(cfg, corpus=corpus)


def _load_world(layout: Layout, cfg: pl.RunConfig) -> pl.World:
    """Rebuild the world around the saved frozen encoder and vocabulary."""
    layout.need(layout.ckpt / "frozen.ckpt", layout.vocab)
    g = cfg.grammar()
    corpus = g.sample_corpus(cfg.corpus_size, rng_stream(cfg.seed, "corpus"))
    frozen = load_encoder(layout.ckpt / "frozen.ckpt")
    surrogate = VisualSurrogate.draw(cfg.d, cfg.gap_norm, cfg.sigma_img, rng_stream(cfg.seed, "gap"))
    return pl.World(cfg, g, TemplateSet.load(), Vocabulary.load(layout.vocab), corpus, frozen, surrogate, [])


def stage_align(layout: Layout, cfg: pl.RunConfig) -> pl.World:
    world = _world(cfg)
    world.vocab.save(layout.vocab)
    save_params(world.frozen.named(), layout.ckpt / "frozen.ckpt")
    _manifest(layout, cfg, [("align.final_loss", f"{world.align_curve[-1]:.6f}" if world.align_curve else "nan"),
                            ("frozen.sha256", world.frozen.digest())])
    return world


def stage_phi(layout: Layout, cfg: pl.RunConfig, world: pl.World):
    phi, curve = pl.train_phi(world)
    pl.save_phi(phi, layout.ckpt / "phi.ckpt")
    _manifest(layout, cfg, [("phi.final_loss", f"{curve[-1]:.6f}" if curve else "nan")])
    return phi


def stage_triplets(layout: Layout, cfg: pl.RunConfig, world: pl.World, phi):
    try:
        trips, st = pl.make_triplets(world, phi)
    except TripletError as e:
        raise CliError(EXIT_INPUT, f"triplet generation failed: {e}") from None
    if not trips:
        raise CliError(EXIT_INPUT, "no triplet passed the filter")
    save_triplets(trips, layout.triplets)
    _manifest(layout, cfg, _triplet_entries(st, layout.triplets))
    return trips


def _triplet_entries(st: pl.TripletStats, path: Path) -> list[tuple[str, object]]:
    return [("triplets.generated", st.generated), ("triplets.kept", st.kept),
            ("triplets.pass_rate", f"{st.pass_rate:.6f}"), ("triplets.filter_threshold", st.threshold),
            ("triplets.eligible_keywords", st.eligible_keywords), ("triplets.sha256", pl.sha256_file(path))]


def stage_train(layout: Layout, cfg: pl.RunConfig, world: pl.World, phi, trips) -> DualEncoder:
    dual, res = pl.train_encoder(world, phi, trips)
    save_params(dual.learnable.named(), layout.ckpt / "learnable.ckpt")
    _manifest(layout, cfg, [("train.steps", len(res.history)),
                            ("train.final_loss", f"{res.history[-1]:.6f}" if res.history else "nan"),
                            ("train.model_selection", "last_step"),
                            ("learnable.sha256", dual.learnable.digest()),
                            ("frozen.sha256_after_train", dual.frozen.digest())])
    return dual


def stage_eval(layout: Layout, cfg: pl.RunConfig, world: pl.World, phi, dual: DualEncoder):
    bench = pl.build_benchmark(world)
    reps = [evaluate_cir(dual, phi, bench, m, world.vocab) for m in MODES]
    (layout.reports / "eval.tsv").write_text(format_report(reps), encoding="utf-8", newline="\n")
    save_gallery(bench, layout.ckpt / "gallery.ckpt")
    _manifest(layout, cfg, [(f"eval.{r.mode}.map5", f"{r.map[5]:.6f}") for r in reps]
              + [(f"eval.{r.mode}.avg", f"{r.average:.6f}") for r in reps])
    return reps


def _load_phi(layout: Layout):
    layout.need(layout.ckpt / "phi.ckpt")
    return pl.load_phi(layout.ckpt / "phi.ckpt")


def _load_dual(layout: Layout, world: pl.World) -> DualEncoder:
    layout.need(layout.ckpt / "learnable.ckpt")
    return DualEncoder(world.frozen, load_encoder(layout.ckpt / "learnable.ckpt"))


# ---------------------------------------------------------------- commands

def cmd_gen_triplets(args, cfg: pl.RunConfig) -> int:
    corpus_path = Path(args.corpus)
    if not corpus_path.is_file():
        raise CliError(EXIT_INPUT, f"corpus not found: {corpus_path}")
    corpus = [ln.strip() for ln in corpus_path.read_text(encoding="utf-8").splitlines() if ln.strip()]
    if len(corpus) < 2:
        raise CliError(EXIT_INPUT, "corpus needs at least 2 captions")
    world = _world(cfg, corpus=corpus)
    phi, _ = pl.train_phi(world)
    try:
        trips, st = pl.make_triplets(world, phi)
    except TripletError as e:
        raise CliError(EXIT_INPUT, f"triplet generation failed: {e}") from None
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_triplets(trips, out)
    pl.write_manifest(out.with_name(out.name + ".manifest"),
                      [(f"config.{k}", v) for k, v in cfg.items()]
                      + [("corpus.sha256", pl.sha256_file(corpus_path)), ("corpus.size", len(corpus))]
                      + _triplet_entries(st, out))
    print(f"{st.kept} of {st.generated} triplets kept (threshold {st.threshold}) -> {out}")
    return EXIT_OK


def cmd_pretrain_phi(args, cfg, layout: Layout) -> int:
    layout.make()
    world = stage_align(layout, cfg)
    stage_phi(layout, cfg, world)
    print(f"wrote {layout.ckpt / 'frozen.ckpt'} and {layout.ckpt / 'phi.ckpt'}")
    return EXIT_OK


def cmd_train(args, cfg, layout: Layout) -> int:
    layout.make()
    world = _load_world(layout, cfg)
    phi = _load_phi(layout)
    layout.need(layout.triplets)
    try:
        trips = load_triplets(layout.triplets)
    except TripletError as e:
        raise CliError(EXIT_INPUT, str(e)) from None
    stage_train(layout, cfg, world, phi, trips)
    print(f"wrote {layout.ckpt / 'learnable.ckpt'}")
    return EXIT_OK


def cmd_eval(args, cfg, layout: Layout) -> int:
    world = _load_world(layout, cfg)
    phi = _load_phi(layout)
    dual = _load_dual(layout, world)
    layout.make()
    reps = stage_eval(layout, cfg, world, phi, dual)
    sys.stdout.write(format_report(reps))
    return EXIT_OK


def cmd_probe(args, cfg, layout: Layout) -> int:
    world = _load_world(layout, cfg)
    phi = _load_phi(layout)
    dual = _load_dual(layout, world)
    layout.make()
    bench = pl.build_benchmark(world)
    pair = None
    if args.with_pair:
        layout.need(layout.triplets)
        pair, _ = pl.train_encoder(world, phi, load_triplets(layout.triplets), **pl.ABLATION_ROWS["tcl_pair"])
    reps, (fm, rm) = pl.probe_report(world, phi, bench, dual, pair)
    text = format_report(reps) + f"avg_cosine\tfrozen\t{fm:.6f}\navg_cosine\trtd\t{rm:.6f}\n"
    (layout.reports / "probe.tsv").write_text(text, encoding="utf-8", newline="\n")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_ablate(args, cfg, layout: Layout) -> int:
    layout.make()
    world = pl.build_world(cfg)
    phi, _ = pl.train_phi(world)
    try:
        trips, _ = pl.make_triplets(world, phi)
    except TripletError as e:
        raise CliError(EXIT_INPUT, f"triplet generation failed: {e}") from None
    bench = pl.build_benchmark(world)
    rows = pl.run_ablation(world, phi, trips, bench)
    text = pl.format_ablation(rows)
    (layout.reports / "ablation.tsv").write_text(text, encoding="utf-8", newline="\n")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_pipeline(args, cfg, layout: Layout) -> int:
    layout.make()
    start = STAGES.index(args.stage) if args.stage != "all" else 0
    stage = STAGES[start]
    try:
        if start == 0:
            world = stage_align(layout, cfg)
        else:
            world = _load_world(layout, cfg)
        stage = "phi"
        phi = stage_phi(layout, cfg, world) if start <= 1 else _load_phi(layout)
        stage = "triplets"
        if start <= 2:
            trips = stage_triplets(layout, cfg, world, phi)
        elif start == 3:
            layout.need(layout.triplets)
            trips = load_triplets(layout.triplets)
        stage = "train"
        dual = stage_train(layout, cfg, world, phi, trips) if start <= 3 else _load_dual(layout, world)
        stage = "eval"
        reps = stage_eval(layout, cfg, world, phi, dual)
    except CliError as e:
        raise CliError(e.code, f"stage {stage}: {e}") from None
    except NumericError as e:
        raise CliError(EXIT_NUMERIC, f"stage {stage}: {e}") from None
    sys.stdout.write(format_report(reps))
    return EXIT_OK


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    common.add_argument("--seed", type=int, help="global seed (overrides config)")
    common.add_argument("--threads", type=int, default=1, help="BLAS/OpenMP worker cap (default 1)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="rtdlab", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    g = sub.add_parser("gen-triplets", parents=[common], help="generate and filter text triplets")
    g.add_argument("--corpus", required=True, help="captions, one per line")
    g.add_argument("--out", required=True, help="output TSV path")
    for name, helptext in (("pretrain-phi", "self-align the encoder and pretrain phi"),
                           ("train", "RTD fine-tuning from saved artifacts"),
                           ("eval", "evaluate saved checkpoints on the synthetic benchmark"),
                           ("probe", "text-only and average-cosine discrepancy probes"),
                           ("ablate", "train and evaluate the ablation grid plus the naive row"),
                           ("pipeline", "run every stage end to end")):
        sp = sub.add_parser(name, parents=[common], help=helptext)
        sp.add_argument("--out", required=True, help="run directory")
        if name == "pipeline":
            sp.add_argument("--stage", default="all", choices=("all",) + STAGES,
                            help="first stage to run; earlier artifacts are read from --out")
        if name == "probe":
            sp.add_argument("--with-pair", action="store_true",
                            help="also train and probe the (T_r, T_r) pair-updated encoder")
    return p


COMMANDS = {
    "pretrain-phi": cmd_pretrain_phi, "train": cmd_train, "eval": cmd_eval, "probe": cmd_probe,
    "ablate": cmd_ablate, "pipeline": cmd_pipeline,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_INPUT
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("rtdlab: --threads must be >= 1", file=sys.stderr)
        return EXIT_INPUT
    try:
        cfg = load_config(args)
        with threadpool_limits(limits=args.threads):
            if args.command == "gen-triplets":
                return cmd_gen_triplets(args, cfg)
            return COMMANDS[args.command](args, cfg, Layout(Path(args.out)))
    except CliError as e:
        print(f"rtdlab: {e}", file=sys.stderr)
        return e.code
    except NumericError as e:
        print(f"rtdlab: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except FileNotFoundError as e:
        print(f"rtdlab: missing artifact: {e}", file=sys.stderr)
        return EXIT_MISSING


if __name__ == "__main__":
    sys.exit(main())
