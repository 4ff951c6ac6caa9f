"""Command-line entry point: toy-corpus, simulate, train, decode, score.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .config import ConfigError, RunConfig, load_config

log = logging.getLogger("spkmask")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3


class DataError(Exception):
    pass


def _vocab(cfg: RunConfig):
    from .labels import Vocabulary

    charset = sorted(set("".join(cfg.corpus.vocab)) | {" "})
    return Vocabulary(cfg.labels.max_speakers, cfg.labels.max_s, "".join(charset))


def _feature_config(cfg: RunConfig):
    from .signal import FeatureConfig

    return FeatureConfig(num_mels=cfg.features.num_mels, window_ms=cfg.features.window_ms,
                         stride_ms=cfg.features.stride_ms)


def cmd_toy_corpus(cfg: RunConfig) -> int:
    from .simulate import gen_toy_corpus, write_corpus

    corpus = gen_toy_corpus(cfg.corpus.num_speakers, cfg.corpus.utts_per_speaker, cfg.corpus.vocab, cfg.seed,
                            cfg.corpus.word_dur_s, tuple(cfg.corpus.words_per_utt))
    manifest = cfg.paths.resolve("corpus_manifest")
    out = write_corpus(corpus, manifest.parent)
    if out != manifest:
        out.replace(manifest)
    log.info("wrote %d utterances to %s", len(corpus), manifest)
    return EXIT_OK


def cmd_simulate(cfg: RunConfig) -> int:
    from .decode import reference_diarization, write_rttm
    from .labels import LabelError, Scheme, build_label
    from .simulate import RatioSpec, build_eval_set, build_training_set, read_corpus, write_mixtures

    corpus = read_corpus(cfg.paths.resolve("corpus_manifest"))
    sim = cfg.simulate
    if sim.mode == "train":
        examples = build_training_set(corpus, RatioSpec(sim.ratio), sim.sir_db, tuple(sim.overlap_range_s),
                                      cfg.seed, sim.vad_threshold_db)
    else:
        examples = build_eval_set(corpus, sim.eval_case, sim.eval_overlap_s, sim.sir_db, cfg.seed,
                                  sim.vad_threshold_db)
    vocab = _vocab(cfg)
    labels = {}
    for ex in examples:
        labels[ex.id] = {}
        for scheme in Scheme:
            try:
                labels[ex.id][scheme.value] = build_label(ex, scheme, vocab).tokens
            except LabelError as err:
                log.warning("%s: no %s label (%s)", ex.id, scheme.value, err)
    manifest = cfg.paths.resolve("mixture_manifest")
    write_mixtures(examples, manifest.parent, labels, manifest.name)
    vocab.save(manifest.parent / "vocab.json")
    write_rttm(cfg.paths.resolve("ref_rttm"), {ex.id: reference_diarization(ex) for ex in examples})
    counts = {}
    for ex in examples:
        counts[ex.case_kind] = counts.get(ex.case_kind, 0) + 1
    log.info("wrote %d mixtures to %s (%s)", len(examples), manifest, counts)
    return EXIT_OK


def _model_config(cfg: RunConfig, vocab):
    from .model import ModelConfig

    m = cfg.model
    return ModelConfig(vocab_size=len(vocab), num_encoder_blocks=m.num_encoder_blocks,
                       num_decoder_blocks=m.num_decoder_blocks, hidden_dim=m.hidden_dim, num_heads=m.num_heads,
                       num_mels=cfg.features.num_mels, max_frames=m.max_frames, max_tokens=m.max_tokens,
                       mask_variant=m.mask_variant, dropout_mask_cnn=m.dropout_mask_cnn, seed=cfg.seed)


def cmd_train(cfg: RunConfig) -> int:
    from .simulate import read_mixtures
    from .train import TrainConfig, train_run

    examples = read_mixtures(cfg.paths.resolve("mixture_manifest"))
    if not examples:
        raise DataError("training manifest is empty")
    vocab = _vocab(cfg)
    t = cfg.train
    train_config = TrainConfig(lam=t.lam, lr_init=t.lr_init, lr_min=t.lr_min,
                               restart_period_steps=t.restart_period_steps, epochs=t.epochs, max_steps=t.max_steps,
                               batch_size=t.batch_size, seed=cfg.seed, deterministic=t.deterministic,
                               grad_clip=t.grad_clip, scheme=cfg.labels.scheme, checkpoint_every=t.checkpoint_every)
    checkpoint = cfg.paths.resolve("checkpoint")
    metrics = cfg.paths.resolve("metrics_log")
    checkpoint.parent.mkdir(parents=True, exist_ok=True)
    metrics.parent.mkdir(parents=True, exist_ok=True)
    result = train_run(examples, _model_config(cfg, vocab), train_config, vocab, _feature_config(cfg),
                       metrics_path=metrics, checkpoint_path=checkpoint)
    last = result.metrics[-1]
    log.info("trained %d steps; final combined loss %.5f; checkpoint %s", last["step"] + 1, last["combined"],
             checkpoint)
    return EXIT_OK


def cmd_decode(cfg: RunConfig) -> int:
    from .decode import (
        decode_example,
        example_num_frames,
        hypothesis_to_diarization,
        reference_hypothesis,
        write_rttm,
    )
    from .labels import Scheme, Vocabulary
    from .model import load_checkpoint
    from .simulate import read_mixtures
    from .train import example_features

    examples = read_mixtures(cfg.paths.resolve("mixture_manifest"))
    meta = {"diarization": cfg.decode.diarization}
    if cfg.decode.oracle:
        vocab, scheme, model = _vocab(cfg), Scheme(cfg.labels.scheme), None
        meta.update(scheme=scheme.value, lam=None, mask_variant=None, oracle=True)
    else:
        model, extra = load_checkpoint(cfg.paths.resolve("checkpoint"))
        vocab = Vocabulary.from_json(extra["vocab"])
        scheme = Scheme(extra["scheme"])
        meta.update(scheme=scheme.value, lam=extra.get("lam"), mask_variant=model.config.mask_variant,
                    oracle=False)
    meta["diarized"] = not (cfg.decode.diarization == "timestamps" and not scheme.timestamped)
    features = _feature_config(cfg)
    hyps, diar = [], {}
    for ex in examples:
        if model is None:
            hyp = reference_hypothesis(ex, vocab, scheme)
        else:
            feats = example_features(ex, model.config, features)
            hyp = decode_example(model, feats, vocab, scheme, ex.id, cfg.decode.max_len)
        hyps.append(hyp)
        if meta["diarized"]:
            diar[ex.id] = hypothesis_to_diarization(hyp, cfg.decode.diarization, cfg.decode.threshold,
                                                    cfg.decode.min_dur_s, example_num_frames(ex))
    out = cfg.paths.resolve("hypotheses")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps({"meta": meta, "hypotheses": [h.to_json() for h in hyps]}, indent=1) + "\n")
    rttm = cfg.paths.resolve("hyp_rttm")
    rttm.parent.mkdir(parents=True, exist_ok=True)
    write_rttm(rttm, diar)
    log.info("decoded %d mixtures to %s", len(hyps), out)
    return EXIT_OK


def _plot_masks(path: Path, example, hyp) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    order = example.speaker_order()
    fig, axes = plt.subplots(len(order), 1, figsize=(8, 1.6 * len(order)), squeeze=False)
    for k, spk in enumerate(order, 1):
        ax = axes[k - 1, 0]
        ref = example.speaker_masks[spk].values
        ax.fill_between(range(len(ref)), ref, step="post", alpha=0.3, label=f"reference {spk}")
        if k in hyp.masks:
            ax.plot(hyp.masks[k].values[:len(ref)], label=f"predicted spk{k}")
        ax.set_ylim(-0.05, 1.05)
        ax.legend(loc="upper right", fontsize=7)
    axes[-1, 0].set_xlabel("frame (20 ms)")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def cmd_score(cfg: RunConfig) -> int:
    from .decode import DiarizationAnnotation, Hypothesis, read_rttm
    from .labels import reference_blocks
    from .metrics import ScoringConfig, score_corpus
    from .simulate import read_mixtures

    examples = read_mixtures(cfg.paths.resolve("mixture_manifest"))
    refs = read_rttm(cfg.paths.resolve("ref_rttm"), "reference")
    hyp_path = cfg.paths.resolve("hypotheses")
    if not hyp_path.exists():
        raise FileNotFoundError(f"no hypotheses file: {hyp_path}")
    payload = json.loads(hyp_path.read_text())
    hyps = {h["id"]: Hypothesis.from_json(h) for h in payload["hypotheses"]}
    hyp_rttm = cfg.paths.resolve("hyp_rttm")
    hyp_diar = read_rttm(hyp_rttm, "hypothesis") if hyp_rttm.exists() else {}
    scored_diar = payload.get("meta", {}).get("diarized", bool(hyp_diar))
    items = []
    plot_dir = cfg.paths.resolve("report").parent / "plots"
    for ex in examples:
        if ex.id not in hyps:
            raise DataError(f"no hypothesis for mixture {ex.id}")
        hyp = hyps[ex.id]
        ref_words = {b.speaker_id: b.words for b in reference_blocks(ex)}
        item = {
            "id": ex.id,
            "ref_words": ref_words,
            "hyp_words": hyp.words_by_speaker(),
            "ref_diarization": refs.get(ex.id),
            "hyp_diarization": None,
            "ref_count": ex.num_speakers,
            "hyp_count": hyp.speaker_count,
        }
        if scored_diar and item["ref_diarization"] is not None:
            item["hyp_diarization"] = hyp_diar.get(ex.id, DiarizationAnnotation([], "hypothesis"))
        items.append(item)
        if cfg.scoring.plots:
            plot_dir.mkdir(parents=True, exist_ok=True)
            _plot_masks(plot_dir / f"{ex.id}.svg", ex, hyp)
    report = score_corpus(items, ScoringConfig(collar_s=cfg.scoring.collar_s), payload.get("meta", {}))
    out = cfg.paths.resolve("report")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=1) + "\n")
    corpus = report["corpus"]
    der = corpus.get("der", {}).get("der")
    log.info("WER %.4f  DER %s  SCA %.2f  -> %s", corpus["wer"]["wer"],
             "n/a" if der is None else f"{der:.4f}", corpus["sca"], out)
    return EXIT_OK


COMMANDS = {
    "toy-corpus": cmd_toy_corpus,
    "simulate": cmd_simulate,
    "train": cmd_train,
    "decode": cmd_decode,
    "score": cmd_score,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spkmask", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("-c", "--config", help="YAML or JSON run configuration")
    parser.add_argument("-s", "--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a config value (repeatable)")
    parser.add_argument("--seed", type=int, help="shortcut for --set seed=N")
    parser.add_argument("--work-dir", help="shortcut for --set paths.work_dir=DIR")
    parser.add_argument("--dump-config", action="store_true", help="print the resolved config and exit")
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("SPKMASK_LOG_LEVEL", "INFO").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.work_dir is not None:
        overrides.append(f"paths.work_dir={args.work_dir}")
    try:
        cfg = load_config(args.config, overrides)
    except ConfigError as err:
        log.error("config error: %s", err)
        return EXIT_USAGE
    if args.dump_config:
        print(json.dumps(cfg.to_dict(), indent=1))
        return EXIT_OK
    try:
        return COMMANDS[args.command](cfg)
    except (DataError, FileNotFoundError, NotADirectoryError, FileExistsError, PermissionError) as err:
        log.error("data error: %s", err)
        return EXIT_DATA
    except ValueError as err:
        # domain errors (simulation, labels, audio, diarization) all derive from ValueError
        log.error("data error: %s", err)
        return EXIT_DATA
    except OSError as err:
        log.error("data error: %s", err)
        return EXIT_DATA
    except Exception:
        log.exception("internal error")
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
