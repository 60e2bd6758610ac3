"""``accent-tts`` command line entry point.

Every hyperparameter lives in the YAML run config; flags only pick the
command, the config file, ``--set key=value`` overrides and ``--seed``.
Outputs go to ``<run_root>/<config fingerprint>/``::

    config.yaml            resolved config
    corpus/                manifest.jsonl, mels/, inventory.json, speakers.spk
    stage1/                stage1.pt, stage1_loss.tsv, stage1_loss.png
    targets/               global.f32, index.tsv, local/
    stage2/                stage2.pt, stage2_loss.tsv, stage2_loss.png
    centroids/             centroids.mel (+ .labels), aecs.png
    synth/                 <name>.mel, <name>.png, optional <name>.wav
    eval/                  report.csv, metrics.png, aecs.png
    export/                embeddings_<kind>.csv

Exit status is 0 on success, 2 for an invalid config or command line and 1
for a runtime failure. Failures print one JSON error record to stderr;
successes print one JSON record listing the files written.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from . import plotting
from .config import ConfigError, RunConfig, dump_config, load_config
from .corpus import (CorpusError, Manifest, generate_synthetic_corpus, load_manifest,
                     load_speaker_embeddings, prepare_corpus, save_manifest,
                     save_speaker_embeddings, save_synthetic_spec, split_dataset, write_mel)
from .evaluation import MetricReport, aecs_report, evaluate_pair, export_embeddings, f0_metrics
from .signal import estimate_f0, griffin_lim, write_wav
from .synthesis import (AccentCentroidTable, SynthesisError, Synthesizer,
                        compute_accent_centroids)
from .training import (LOSS_NAMES, Checkpoint, Targets, TrainingError, embed_utterance,
                       extract_targets, stage1_from_checkpoint, train_stage1, train_stage2)

log = logging.getLogger("accent_tts")

COMMANDS = ("gen-synthetic", "prepare", "train-stage1", "extract-targets", "train-stage2",
            "centroids", "synth", "synth-ref", "evaluate", "export-emb")


class RunError(RuntimeError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        _emit_error("usage", message)
        sys.exit(2)


def _emit_error(kind: str, message: str):
    print(json.dumps({"status": "error", "kind": kind, "message": message}), file=sys.stderr)


# ---------------------------------------------------------------------------
# run-directory helpers


class Run:
    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.dir = cfg.run_dir
        self.written: list[str] = []

    def path(self, *parts) -> Path:
        p = self.dir.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def subdir(self, name: str) -> Path:
        p = self.dir / name
        p.mkdir(parents=True, exist_ok=True)
        return p

    def wrote(self, path):
        self.written.append(str(path))
        return path

    @property
    def manifest_path(self) -> Path:
        c = self.cfg.corpus
        return Path(c.manifest) if c.manifest else self.dir / "corpus" / "manifest.jsonl"

    @property
    def speakers_path(self) -> Path:
        c = self.cfg.corpus
        if c.speaker_embeddings:
            return Path(c.speaker_embeddings)
        return self.dir / "corpus" / "speakers.spk"

    def manifest(self) -> Manifest:
        if not self.manifest_path.exists():
            raise RunError(f"no manifest at {self.manifest_path}; run gen-synthetic or prepare")
        return load_manifest(self.manifest_path)

    def speakers(self):
        if not self.speakers_path.exists():
            raise RunError(f"no speaker embeddings at {self.speakers_path}")
        return load_speaker_embeddings(self.speakers_path)

    def checkpoint(self, stage: str) -> Checkpoint:
        p = self.dir / stage / f"{stage}.pt"
        if not p.exists():
            raise RunError(f"missing {p}; run train-{stage[:5]}-{stage[5:]} first")
        return Checkpoint.load(p)

    def centroids(self) -> AccentCentroidTable:
        p = self.dir / "centroids" / "centroids.mel"
        if not p.exists():
            raise RunError(f"missing {p}; run centroids first")
        return AccentCentroidTable.load(p)


def _progress(every: int):
    def cb(step, rec):
        if every and (step + 1) % every == 0:
            log.info("step %d %s", step + 1,
                     " ".join(f"{k}={v:.4g}" for k, v in rec.items() if k != "step"))
    return cb


# ---------------------------------------------------------------------------
# commands


def cmd_gen_synthetic(run: Run):
    cfg = run.cfg
    spec = cfg.synthetic.spec()
    manifest, table = generate_synthetic_corpus(spec)
    manifest = split_dataset(manifest, cfg.corpus.val_per_speaker, cfg.corpus.test_per_speaker,
                             cfg.corpus.split_seed)
    run.wrote(save_manifest(manifest, run.path("corpus", "manifest.jsonl")))
    save_speaker_embeddings(table, run.path("corpus", "speakers.spk"))
    run.wrote(run.path("corpus", "speakers.spk"))
    save_synthetic_spec(spec, run.path("corpus", "synthetic.npz"))
    run.wrote(run.path("corpus", "synthetic.npz"))
    first = {}
    for u in manifest.utterances:
        first.setdefault(u.accent, u)
    for accent, u in sorted(first.items()):
        run.wrote(plotting.plot_mel(u.mel, run.path("corpus", f"example_{accent}.png"),
                                    title=f"{u.id} ({accent})"))


def cmd_prepare(run: Run):
    c = run.cfg.corpus
    if not c.source:
        raise RunError("corpus.source is empty; set it to the source manifest")
    out = run.path("corpus", "manifest.jsonl")
    manifest = prepare_corpus(c.source, out, run.cfg.mel, c.trim_db)
    manifest = split_dataset(manifest, c.val_per_speaker, c.test_per_speaker, c.split_seed)
    run.wrote(save_manifest(manifest, out, write_mels=True))


def cmd_train_stage1(run: Run):
    manifest, table = run.manifest(), run.speakers()
    out = run.subdir("stage1")
    ckpt = train_stage1(manifest, table, run.cfg.model, run.cfg.training, out_dir=out,
                        callback=_progress(100))
    run.wrote(out / "stage1.pt")
    run.wrote(out / "stage1_loss.tsv")
    names = ["total", *LOSS_NAMES]
    if ckpt.losses and "guide" in ckpt.losses[0]:
        names.append("guide")
    run.wrote(plotting.plot_losses(ckpt.losses, out / "stage1_loss.png", names,
                                   title="stage 1 loss"))


def cmd_extract_targets(run: Run):
    manifest = run.manifest()
    out = run.subdir("targets")
    extract_targets(run.checkpoint("stage1"), manifest, "train", out)
    run.wrote(out / "index.tsv")


def cmd_train_stage2(run: Run):
    manifest = run.manifest()
    stage1 = run.checkpoint("stage1")
    tdir = run.dir / "targets"
    if not (tdir / "index.tsv").exists():
        raise RunError(f"missing {tdir}; run extract-targets first")
    out = run.subdir("stage2")
    ckpt = train_stage2(stage1, Targets.load(tdir), manifest, run.cfg.training, out_dir=out,
                        callback=_progress(100))
    run.wrote(out / "stage2.pt")
    run.wrote(out / "stage2_loss.tsv")
    run.wrote(plotting.plot_losses(ckpt.losses, out / "stage2_loss.png", ["lapm"],
                                   title="stage 2 loss"))


def cmd_centroids(run: Run):
    manifest = run.manifest()
    stage1 = run.checkpoint("stage1")
    table = compute_accent_centroids(stage1, manifest)
    run.wrote(table.save(run.path("centroids", "centroids.mel")))
    model = stage1_from_checkpoint(stage1)
    groups: dict[str, list] = {}
    for u in manifest.subset("train"):
        groups.setdefault(u.accent, []).append(embed_utterance(model, u)[0])
    groups = {a: v for a, v in groups.items() if len(v) >= 2}
    if groups:
        run.wrote(plotting.plot_aecs(aecs_report(groups), run.path("centroids", "aecs.png"),
                                     title="train H_G within-accent cosine"))


def _encode_request(run: Run, manifest: Manifest) -> list[int]:
    text = run.cfg.request.phonemes.split()
    if not text:
        raise RunError("request.phonemes is empty")
    inv = manifest.inventory
    unknown = [s for s in text if inv.index(s) == inv.unk_index]
    if unknown:
        raise RunError(f"unknown phoneme symbol(s): {' '.join(unknown)}")
    return inv.encode(text)


def _write_synth(run: Run, result, name: str, title: str):
    mel_path = run.wrote(run.path("synth", f"{name}.mel"))
    write_mel(mel_path, result.mel)
    run.wrote(plotting.plot_mel(result.mel, run.path("synth", f"{name}.png"),
                                alignment=result.alignments, title=title))
    if result.waveform is not None:
        wav = run.wrote(run.path("synth", f"{name}.wav"))
        write_wav(wav, result.waveform, run.cfg.mel.sample_rate)
    if result.max_steps_reached:
        log.warning("decoder hit max_steps=%d without a stop decision", run.cfg.request.max_steps)
    return {"frames": int(result.mel.shape[0]), "max_steps_reached": bool(result.max_steps_reached)}


def cmd_synth(run: Run):
    r = run.cfg.request
    manifest = run.manifest()
    centroids = run.centroids()
    if r.accent not in centroids:
        raise SynthesisError(f"accent {r.accent!r} is not in the centroid table "
                             f"({', '.join(sorted(centroids.centroids))})")
    syn = Synthesizer(run.checkpoint("stage1"), run.speakers(), run.checkpoint("stage2"),
                      centroids)
    phonemes = _encode_request(run, manifest)
    result = syn.synthesize(phonemes, r.accent, r.speaker, r.max_steps, run.cfg.training.seed,
                            r.griffin_lim_iterations)
    name = r.output or f"{r.speaker}_{r.accent}"
    return _write_synth(run, result, name, f"{r.speaker} as {r.accent}")


def cmd_synth_ref(run: Run):
    r = run.cfg.request
    manifest = run.manifest()
    if not r.reference:
        raise RunError("request.reference is empty; set it to an utterance id")
    try:
        ref = manifest.by_id(r.reference)
    except (KeyError, CorpusError):
        raise RunError(f"unknown reference utterance {r.reference!r}") from None
    phonemes = _encode_request(run, manifest) if r.phonemes else list(ref.phonemes)
    syn = Synthesizer(run.checkpoint("stage1"), run.speakers())
    speaker = r.speaker or ref.speaker
    result = syn.synthesize_with_reference(phonemes, ref.mel, ref.boundaries, speaker,
                                           r.max_steps, run.cfg.training.seed,
                                           r.griffin_lim_iterations)
    name = r.output or f"{speaker}_ref_{ref.id}"
    return _write_synth(run, result, name, f"{speaker} with reference {ref.id}")


def cmd_evaluate(run: Run):
    """LAPM synthesis of every eval-split text against its ground-truth mel."""
    r = run.cfg.request
    manifest = run.manifest()
    utts = manifest.subset(r.eval_split)
    if not utts:
        raise RunError(f"split {r.eval_split!r} is empty")
    stage1 = run.checkpoint("stage1")
    syn = Synthesizer(stage1, run.speakers(), run.checkpoint("stage2"), run.centroids())
    seed = run.cfg.training.seed
    report = MetricReport()
    groups: dict[str, list] = {}
    for u in sorted(utts, key=lambda u: u.id):
        res = syn.synthesize(u.phonemes, u.accent, u.speaker, r.max_steps, seed)
        gen_f0 = ref_f0 = None
        if r.eval_gl_iterations > 0:
            gen_f0 = estimate_f0(griffin_lim(res.mel, r.eval_gl_iterations, seed))
            ref_f0 = estimate_f0(griffin_lim(u.mel, r.eval_gl_iterations, seed))
        pair, path = evaluate_pair(u.id, u.accent, u.speaker, res.mel, u.mel, gen_f0, ref_f0)
        if r.voiced_only and gen_f0 is not None:
            scores = f0_metrics(gen_f0, ref_f0, path, voiced_only=True)
            pair.f0_rmse_hz, pair.f0_corr = scores.rmse, scores.correlation
        report.pairs.append(pair)
        with torch.no_grad():
            hg = syn.stage1.sigam.encode(torch.from_numpy(res.mel))[0].numpy()
        groups.setdefault(u.accent, []).append(hg)
    aecs = aecs_report({a: v for a, v in groups.items() if len(v) >= 2})
    report.aecs_by_accent = aecs
    for p in report.pairs:
        p.aecs = aecs.get(p.accent)
    run.wrote(report.write(run.path("eval", "report.csv")))
    run.wrote(plotting.plot_metrics(report, run.path("eval", "metrics.png")))
    if aecs:
        run.wrote(plotting.plot_aecs(aecs, run.path("eval", "aecs.png"),
                                     title="generated H_G within-accent cosine"))
    sys.stdout.write(report.to_csv())
    return report.aggregate()


def cmd_export_emb(run: Run):
    which = run.cfg.request.embedding
    path = run.path("export", f"embeddings_{which}.csv")
    rows = export_embeddings(run.checkpoint("stage1"), run.manifest(), which, path)
    run.wrote(path)
    return {"rows": len(rows)}


HANDLERS = {
    "gen-synthetic": cmd_gen_synthetic,
    "prepare": cmd_prepare,
    "train-stage1": cmd_train_stage1,
    "extract-targets": cmd_extract_targets,
    "train-stage2": cmd_train_stage2,
    "centroids": cmd_centroids,
    "synth": cmd_synth,
    "synth-ref": cmd_synth_ref,
    "evaluate": cmd_evaluate,
    "export-emb": cmd_export_emb,
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="accent-tts", description="Accent-controllable multi-speaker TTS.")
    p.add_argument("command", choices=COMMANDS, metavar="command",
                   help="one of: " + ", ".join(COMMANDS))
    p.add_argument("-c", "--config", help="YAML run config (defaults are used when omitted)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted-path override, repeatable")
    p.add_argument("--seed", type=int, help="shorthand for --set training.seed=N")
    p.add_argument("-q", "--quiet", action="store_true", help="only print the result record")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config, args.overrides, args.seed)
    except ConfigError as exc:
        _emit_error("config", str(exc))
        return 2
    run = Run(cfg)
    run.dir.mkdir(parents=True, exist_ok=True)
    (run.dir / "config.yaml").write_text(dump_config(cfg))
    try:
        extra = HANDLERS[args.command](run) or {}
    except (RunError, CorpusError, SynthesisError, TrainingError, FileNotFoundError,
            ValueError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else str(exc)
        _emit_error("runtime", f"{args.command}: {msg}")
        return 1
    record = {"status": "ok", "command": args.command, "run_dir": str(run.dir),
              "fingerprint": cfg.fingerprint, "outputs": run.written, **extra}
    print(json.dumps(record), file=sys.stderr if args.command == "evaluate" else sys.stdout)
    return 0


if __name__ == "__main__":
    sys.exit(main())
