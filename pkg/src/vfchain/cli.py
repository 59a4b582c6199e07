"""Command line entry point: ``vfchain <subcommand> ...``.

Every subcommand writes its outputs through a staging directory so a
failure never leaves partial files behind, and records a ``manifest.json``
(or ``<file>.manifest.json``) that ``vfchain replay`` can re-run.

Exit codes: 0 success, 1 usage error, 2 data/format error,
3 numeric/degenerate input.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import shutil
import sys
import tempfile

from . import __version__
from .chain import RefineConfig, run_chain, write_audit_csv, write_chain_exports
from .contrastive import (
    EncoderKind,
    TrainConfig,
    embed_records,
    initial_score,
    read_encoder,
    train_encoders,
    write_encoder,
)
from .errors import ConfigError, VFChainError
from .evaluation import eer, labels_for, report, write_report_csv, write_roc_csv
from .rng import derive_seed
from .synth import OutlierKind, SynthConfig, generate, write_synth
from .vectorstore import (
    Modality,
    ScoreSet,
    check_pairs_against,
    index_records,
    read_embeddings,
    read_pairs,
    read_scores,
    write_csv,
    write_embeddings,
    write_scores,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# --- staged outputs and manifests -------------------------------------------


@contextlib.contextmanager
def staged_dir(final_dir):
    """Yield a scratch directory whose contents move into ``final_dir`` on success."""
    final_dir = os.path.abspath(final_dir)
    parent = os.path.dirname(final_dir)
    os.makedirs(parent, exist_ok=True)
    stage = tempfile.mkdtemp(prefix=".vfchain-", dir=parent)
    try:
        yield stage
        os.makedirs(final_dir, exist_ok=True)
        for name in sorted(os.listdir(stage)):
            src, dst = os.path.join(stage, name), os.path.join(final_dir, name)
            if os.path.isdir(dst) and not os.path.islink(dst):
                shutil.rmtree(dst)
            os.replace(src, dst)
    finally:
        shutil.rmtree(stage, ignore_errors=True)


@contextlib.contextmanager
def staged_files(*final_paths):
    """Yield scratch paths that replace ``final_paths`` together on success."""
    finals = [os.path.abspath(p) for p in final_paths]
    parent = os.path.dirname(finals[0])
    if not os.path.isdir(parent):
        raise FileNotFoundError(f"output directory {parent} does not exist")
    stage = tempfile.mkdtemp(prefix=".vfchain-", dir=parent)
    try:
        scratch = [os.path.join(stage, f"out{i}") for i in range(len(finals))]
        yield scratch
        for src, dst in zip(scratch, finals):
            os.replace(src, dst)
    finally:
        shutil.rmtree(stage, ignore_errors=True)


PATH_ARGS = {"out", "raw", "voice_encoder", "face_encoder", "embeddings", "pairs", "scores"}


def _rel(value, base):
    if isinstance(value, list):
        return [_rel(v, base) for v in value]
    if "=" in value and not os.path.exists(value):
        name, path = value.split("=", 1)
        return f"{name}={os.path.relpath(os.path.abspath(path), base)}"
    return os.path.relpath(os.path.abspath(value), base)


def _abs(value, base):
    if isinstance(value, list):
        return [_abs(v, base) for v in value]
    if "=" in value and not os.path.exists(os.path.join(base, value)):
        name, path = value.split("=", 1)
        return f"{name}={os.path.normpath(os.path.join(base, path))}"
    return os.path.normpath(os.path.join(base, value))


def build_manifest(args, manifest_dir, outputs) -> dict:
    params = {}
    for key, value in sorted(vars(args).items()):
        if key in ("func", "command"):
            continue
        if key in PATH_ARGS and value is not None:
            value = _rel(value, manifest_dir)
        params[key] = value
    return {
        "tool": "vfchain",
        "version": __version__,
        "subcommand": args.command,
        "seed": getattr(args, "seed", None),
        "args": params,
        "outputs": sorted(outputs),
    }


def write_manifest(path, manifest):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


# --- config builders --------------------------------------------------------


def _synth_config(args) -> SynthConfig:
    return SynthConfig(
        identities=args.identities,
        samples_per_identity=args.samples_per_identity,
        languages=args.languages,
        dim_latent=args.dim_latent,
        dim_raw=args.dim_raw,
        dim_embed=args.dim_embed,
        noise_sigma=args.noise_sigma,
        outlier_rate=args.outlier_rate,
        outlier_kind=args.outlier_kind,
        seed=args.seed,
        train_identities=args.train_identities,
        gender_separation=args.gender_separation,
        language_scale=args.language_scale,
        blast_scale=args.blast_scale,
        interferer_weight=args.interferer_weight,
    )


def _train_config(args, seed) -> TrainConfig:
    return TrainConfig(
        tau=args.tau,
        batch_size=args.batch_size,
        learning_rate=args.learning_rate,
        epochs=args.epochs,
        seed=seed,
        normalize_in_loss=args.normalize_in_loss,
        symmetric_loss=args.symmetric_loss,
        kind=args.kind,
        embed_dim=args.embed_dim,
        hidden_dim=args.hidden_dim,
        output_normalize=args.output_normalize,
        tie_final=args.tie_final,
    )


def _rule(percentile, absolute):
    return ("absolute", absolute) if absolute is not None else ("percentile", percentile)


def _refine_config(args) -> RefineConfig:
    return RefineConfig(
        gender_rule=_rule(args.gender_percentile, args.gender_threshold),
        identity_rule=_rule(args.identity_percentile, args.identity_threshold),
        sim_threshold=args.sim_threshold,
        alpha=args.alpha,
        identity_clusters=args.identity_clusters,
        elbow_target=args.elbow_target,
        elbow_max_k=args.elbow_max_k,
        gender_clusters=args.gender_clusters,
        reward_below=args.reward_below,
        restarts=args.restarts,
    )


# --- stages -------------------------------------------------------------


def _split_raw(records):
    voice = [r for r in records if r.modality is Modality.VOICE]
    face = [r for r in records if r.modality is Modality.FACE]
    return voice, face


def _initial_scores(records, pairs) -> ScoreSet:
    index = index_records(records)
    check_pairs_against(pairs, index)
    return ScoreSet(tuple(
        (p.voice_id, p.face_id, initial_score(index[p.voice_id].vector, index[p.face_id].vector)) for p in pairs
    ))


def _do_train(raw_path, config: TrainConfig, out_dir):
    voice, face = _split_raw(read_embeddings(raw_path))
    result = train_encoders(voice, face, config)
    write_encoder(os.path.join(out_dir, "voice.enc"), result.voice)
    write_encoder(os.path.join(out_dir, "face.enc"), result.face)
    write_csv(os.path.join(out_dir, "losses.csv"), ["epoch", "loss"],
              [(i + 1, float(v)) for i, v in enumerate(result.losses)])
    return result


def _do_refine(records, pairs, initial, config: RefineConfig, seed, jobs, out_dir):
    result = run_chain(records, pairs, initial, config, seed=seed, jobs=jobs)
    write_scores(os.path.join(out_dir, "refined.csv"), result.refined)
    write_audit_csv(os.path.join(out_dir, "audit.csv"), result.audit)
    write_chain_exports(out_dir, result)
    return result


def _do_eval(pairs, named_scores, out_dir):
    results = {}
    for name, scores in named_scores:
        res = eer(scores, labels_for(scores, pairs))
        results[name] = res
        write_roc_csv(os.path.join(out_dir, f"roc_{name}.csv"), res)
    rep = report(results)
    write_report_csv(os.path.join(out_dir, "report.csv"), rep)
    return rep


# --- subcommands --------------------------------------------------------


def cmd_synth(args):
    data = generate(_synth_config(args))
    with staged_dir(args.out) as stage:
        names = write_synth(stage, data)
        write_manifest(os.path.join(stage, "manifest.json"), build_manifest(args, os.path.abspath(args.out), names))
    print(f"wrote {len(data.embeddings)} test embeddings, {len(data.pairs)} pairs to {args.out}")


def cmd_train(args):
    config = _train_config(args, args.seed)
    with staged_dir(args.out) as stage:
        result = _do_train(args.raw, config, stage)
        outputs = ["voice.enc", "face.enc", "losses.csv"]
        write_manifest(os.path.join(stage, "manifest.json"), build_manifest(args, os.path.abspath(args.out), outputs))
    print(f"trained {args.epochs} epochs, final loss {result.losses[-1]:.6f}")


def cmd_embed(args):
    records = read_embeddings(args.raw)
    out = embed_records(records, read_encoder(args.voice_encoder), read_encoder(args.face_encoder))
    with staged_files(args.out, args.out + ".manifest.json") as (tmp, tmp_manifest):
        write_embeddings(tmp, out)
        base = os.path.dirname(os.path.abspath(args.out))
        write_manifest(tmp_manifest, build_manifest(args, base, [os.path.basename(args.out)]))
    print(f"embedded {len(out)} records")


def cmd_score(args):
    scores = _initial_scores(read_embeddings(args.embeddings), read_pairs(args.pairs))
    with staged_files(args.out, args.out + ".manifest.json") as (tmp, tmp_manifest):
        write_scores(tmp, scores)
        base = os.path.dirname(os.path.abspath(args.out))
        write_manifest(tmp_manifest, build_manifest(args, base, [os.path.basename(args.out)]))
    print(f"scored {len(scores)} pairs")


def cmd_refine(args):
    config = _refine_config(args)
    records, pairs, initial = read_embeddings(args.embeddings), read_pairs(args.pairs), read_scores(args.scores)
    with staged_dir(args.out) as stage:
        result = _do_refine(records, pairs, initial, config, args.seed, args.jobs, stage)
        outputs = sorted(os.listdir(stage))
        write_manifest(os.path.join(stage, "manifest.json"), build_manifest(args, os.path.abspath(args.out), outputs))
    print(f"refined {len(result.refined)} scores; {len(result.audit)} modified")


def _named(spec):
    if "=" in spec and not os.path.exists(spec):
        name, path = spec.split("=", 1)
    else:
        name, path = os.path.splitext(os.path.basename(spec))[0], spec
    if not name or any(c in name for c in ",\n/"):
        raise ConfigError(f"bad score set name {name!r}")
    return name, path


def cmd_eval(args):
    pairs = read_pairs(args.pairs)
    named = []
    for spec in args.scores:
        name, path = _named(spec)
        if name in dict(named):
            raise ConfigError(f"duplicate score set name {name!r}")
        named.append((name, read_scores(path)))
    with staged_dir(args.out) as stage:
        rep = _do_eval(pairs, named, stage)
        outputs = sorted(os.listdir(stage))
        write_manifest(os.path.join(stage, "manifest.json"), build_manifest(args, os.path.abspath(args.out), outputs))
    print(rep.display())


def cmd_pipeline(args):
    synth_cfg = _synth_config(args)
    if synth_cfg.train_identities < 2:
        raise ConfigError("pipeline needs --train-identities >= 2 to train encoders")
    train_cfg = _train_config(args, derive_seed(args.seed, "pipeline/train") % 2**32)
    refine_cfg = _refine_config(args)
    with staged_dir(args.out) as stage:
        data = generate(synth_cfg)
        os.makedirs(os.path.join(stage, "synth"))
        write_synth(os.path.join(stage, "synth"), data)
        os.makedirs(os.path.join(stage, "encoders"))
        trained = _do_train(os.path.join(stage, "synth", "raw_train.tsv"), train_cfg, os.path.join(stage, "encoders"))
        embedded = embed_records(data.raw_test, trained.voice, trained.face)
        write_embeddings(os.path.join(stage, "embeddings.tsv"), embedded)
        initial = _initial_scores(embedded, data.pairs)
        write_scores(os.path.join(stage, "scores.csv"), initial)
        os.makedirs(os.path.join(stage, "refine"))
        refined = _do_refine(embedded, data.pairs, initial, refine_cfg, derive_seed(args.seed, "pipeline/refine"),
                             args.jobs, os.path.join(stage, "refine"))
        os.makedirs(os.path.join(stage, "eval"))
        rep = _do_eval(data.pairs, [("raw", initial), ("refined", refined.refined)], os.path.join(stage, "eval"))
        outputs = []
        for root, _, files in os.walk(stage):
            outputs += [os.path.relpath(os.path.join(root, f), stage) for f in files]
        write_manifest(os.path.join(stage, "manifest.json"), build_manifest(args, os.path.abspath(args.out), outputs))
    print(rep.display())


def cmd_replay(args):
    with open(args.manifest, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("tool") != "vfchain" or manifest.get("subcommand") not in COMMANDS:
        raise ConfigError(f"{args.manifest} is not a vfchain manifest")
    base = os.path.dirname(os.path.abspath(args.manifest))
    params = dict(manifest["args"])
    for key in PATH_ARGS & params.keys():
        if params[key] is not None:
            params[key] = _abs(params[key], base)
    ns = argparse.Namespace(command=manifest["subcommand"], **params)
    COMMANDS[ns.command](ns)


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "embed": cmd_embed,
    "score": cmd_score,
    "refine": cmd_refine,
    "eval": cmd_eval,
    "pipeline": cmd_pipeline,
}


# --- argument parsing ---------------------------------------------------------


def _add_common(p):
    p.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    p.add_argument("--jobs", type=int, default=1, help="worker threads for clustering restarts")


def _add_synth_flags(p, train_identities=0):
    d = SynthConfig()
    p.add_argument("--identities", type=int, default=d.identities)
    p.add_argument("--samples-per-identity", type=int, default=d.samples_per_identity)
    p.add_argument("--languages", type=int, default=d.languages)
    p.add_argument("--dim-latent", type=int, default=d.dim_latent)
    p.add_argument("--dim-raw", type=int, default=d.dim_raw)
    p.add_argument("--dim-embed", type=int, default=d.dim_embed)
    p.add_argument("--noise-sigma", type=float, default=d.noise_sigma)
    p.add_argument("--outlier-rate", type=float, default=d.outlier_rate)
    p.add_argument("--outlier-kind", choices=[k.value for k in OutlierKind], default=d.outlier_kind.value)
    p.add_argument("--train-identities", type=int, default=train_identities)
    p.add_argument("--gender-separation", type=float, default=d.gender_separation)
    p.add_argument("--language-scale", type=float, default=d.language_scale)
    p.add_argument("--blast-scale", type=float, default=d.blast_scale)
    p.add_argument("--interferer-weight", type=float, default=d.interferer_weight)


def _add_train_flags(p):
    d = TrainConfig()
    p.add_argument("--tau", type=float, default=d.tau, help="softmax temperature")
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--learning-rate", type=float, default=d.learning_rate)
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--normalize-in-loss", action=argparse.BooleanOptionalAction, default=d.normalize_in_loss)
    p.add_argument("--symmetric-loss", action=argparse.BooleanOptionalAction, default=d.symmetric_loss)
    p.add_argument("--kind", choices=[k.value for k in EncoderKind], default=d.kind.value)
    p.add_argument("--embed-dim", type=int, default=d.embed_dim)
    p.add_argument("--hidden-dim", type=int, default=d.hidden_dim)
    p.add_argument("--output-normalize", action=argparse.BooleanOptionalAction, default=d.output_normalize)
    p.add_argument("--tie-final", action=argparse.BooleanOptionalAction, default=d.tie_final,
                   help="share the last linear map between the two encoders")


def _add_refine_flags(p):
    d = RefineConfig()
    p.add_argument("--gender-percentile", type=float, default=d.gender_rule[1],
                   help="gender outlier cut as a nearest-rank percentile of distances")
    p.add_argument("--gender-threshold", type=float, default=None, help="absolute gender outlier distance")
    p.add_argument("--identity-percentile", type=float, default=d.identity_rule[1])
    p.add_argument("--identity-threshold", type=float, default=None)
    p.add_argument("--sim-threshold", type=float, default=d.sim_threshold,
                   help="prototype similarity needed for a reward")
    p.add_argument("--alpha", type=float, default=d.alpha, help="reward shrink factor in (0, 1]")
    p.add_argument("--identity-clusters", type=int, default=None, help="fixed identity cluster count (skips the elbow)")
    p.add_argument("--elbow-target", type=int, default=None,
                   help="elbow target cluster count (default: half the number of test pairs)")
    p.add_argument("--elbow-max-k", type=int, default=d.elbow_max_k)
    p.add_argument("--gender-clusters", type=int, choices=[1, 2], default=d.gender_clusters)
    p.add_argument("--reward-below", action=argparse.BooleanOptionalAction, default=d.reward_below,
                   help="reward when similarity is below the threshold (literal variant)")
    p.add_argument("--restarts", type=int, default=d.restarts)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vfchain", description="Contrastive voice-face scoring with chaining-cluster refinement.")
    parser.add_argument("--version", action="version", version=f"vfchain {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic benchmark")
    p.add_argument("--out", required=True)
    _add_synth_flags(p)
    _add_common(p)

    p = sub.add_parser("train", help="train voice and face encoders")
    p.add_argument("--raw", required=True, help="labelled raw feature records")
    p.add_argument("--out", required=True)
    _add_train_flags(p)
    _add_common(p)

    p = sub.add_parser("embed", help="apply encoders to raw records")
    p.add_argument("--raw", required=True)
    p.add_argument("--voice-encoder", required=True)
    p.add_argument("--face-encoder", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("score", help="initial 1 - cos scores for a pair manifest")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--pairs", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("refine", help="chaining-cluster score refinement")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--pairs", required=True)
    p.add_argument("--scores", required=True)
    p.add_argument("--out", required=True)
    _add_refine_flags(p)
    _add_common(p)

    p = sub.add_parser("eval", help="EER report for one or more score files")
    p.add_argument("--pairs", required=True)
    p.add_argument("--scores", required=True, action="append", help="[NAME=]PATH, repeatable")
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("pipeline", help="synth, train, embed, score, refine and eval in one go")
    p.add_argument("--out", required=True)
    _add_synth_flags(p, train_identities=200)
    _add_train_flags(p)
    _add_refine_flags(p)
    _add_common(p)

    p = sub.add_parser("replay", help="re-run a command from its manifest")
    p.add_argument("manifest")
    return parser


def run(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if getattr(args, "jobs", 1) < 1:
            raise ConfigError("--jobs must be at least 1")
        if args.command == "replay":
            cmd_replay(args)
        else:
            COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except VFChainError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
