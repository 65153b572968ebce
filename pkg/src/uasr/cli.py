"""Single command-line entry point for the whole pipeline.

Subcommands: featurize, cluster, synth, phonemize, lm, train, decode,
eval, select, selftest. Every run ends with one JSON summary line on
stdout; ``--pretty`` adds human-readable output before it. Exit codes:
0 success, 1 contract violation, 2 I/O or format error, 64 usage.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import dsp, quantizer, synthbench, textproc
from .errors import FormatError, UasrError, UnsupportedFormatError
from .evalkit import beam_decode, greedy_decode, per
from .model import (
    Discriminator,
    DiscriminatorConfig,
    Generator,
    GeneratorConfig,
    load_checkpoint,
)
from .objectives import LossWeights
from .textproc import SIL, UnitInventory
from .trainer import TrainConfig, Trainer, selection_metric

EXIT_OK = 0
EXIT_CONTRACT = 1
EXIT_IO = 2
EXIT_USAGE = 64

log = logging.getLogger("uasr")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _load_config(path) -> dict:
    if path is None:
        return {}
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def _emit(summary: dict, pretty: bool = False) -> None:
    if pretty:
        for k, v in summary.items():
            print(f"  {k}: {v}")
    print(json.dumps(summary))


def _feature_files(directory) -> list[Path]:
    files = sorted(Path(directory).glob("*.feat"))
    if not files:
        raise FormatError(f"no .feat files found in {directory}")
    return files


def _load_feature_dir(directory) -> list[np.ndarray]:
    return [dsp.load_features(p).frames for p in _feature_files(directory)]


def _load_units(path) -> UnitInventory:
    units = [ln.strip() for ln in Path(path).read_text(encoding="utf-8").splitlines()
             if ln.strip()]
    return UnitInventory(units)


def _save_units(path, inventory: UnitInventory) -> None:
    Path(path).write_text("\n".join(inventory.units) + "\n", encoding="utf-8")


def _save_feature_dir(directory, sequences, frame_rate: float) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for i, frames in enumerate(sequences):
        dsp.save_features(directory / f"utt{i:05d}.feat",
                          dsp.FeatureSequence(frames=np.asarray(frames, dtype=np.float32),
                                              frame_rate=frame_rate))


# --- subcommands ----------------------------------------------------------


def cmd_featurize(args) -> dict:
    cfg = dsp.MfccConfig(**_load_config(args.config))
    src = Path(args.input)
    wavs = sorted(src.glob("*.wav")) if src.is_dir() else [src]
    if not wavs:
        raise FormatError(f"no .wav files found in {src}")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    frames_total = 0
    for w in wavs:
        sig = dsp.read_wav(w)
        if args.remove_silence:
            sig = dsp.remove_silence(sig)
        feats = dsp.mfcc(sig, cfg)
        dsp.save_features(out / (w.stem + ".feat"), feats)
        frames_total += len(feats)
    return {"command": "featurize", "files": len(wavs), "frames": frames_total,
            "dim": cfg.dim, "out": str(out)}


def cmd_cluster(args) -> dict:
    feats = _load_feature_dir(args.features)
    cb = quantizer.fit_kmeans(feats, k=args.k, seed=args.seed)
    quantizer.save_codebook(args.out, cb)
    summary = {"command": "cluster", "k": cb.k, "dim": cb.feature_dim,
               "frames": int(sum(len(f) for f in feats)), "out": str(args.out)}
    if args.labels_out:
        labels = [quantizer.assign(cb, f) for f in feats]
        quantizer.save_labels(args.labels_out, labels)
        summary["labels_out"] = str(args.labels_out)
    return summary


def cmd_synth(args) -> dict:
    kw = _load_config(args.config)
    if args.seed is not None:
        kw["seed"] = args.seed
    spec = synthbench.SynthSpec(**kw)
    corpus = synthbench.generate(spec)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _save_feature_dir(out / "train", corpus.train_features, corpus.frame_rate)
    _save_feature_dir(out / "dev", corpus.dev_features, corpus.frame_rate)
    quantizer.save_labels(out / "train_frame_labels.txt", corpus.train_labels)
    quantizer.save_labels(out / "dev_frame_labels.txt", corpus.dev_labels)
    inv = corpus.inventory
    textproc.write_transcripts(out / "train_refs.txt", corpus.train_refs, inv)
    textproc.write_transcripts(out / "dev_refs.txt", corpus.dev_refs, inv)
    textproc.write_transcripts(out / "text.txt", corpus.text, inv)
    _save_units(out / "units.txt", inv)
    (out / "spec.json").write_text(json.dumps(asdict(spec)), encoding="utf-8")
    return {"command": "synth", "train_utts": len(corpus.train_features),
            "dev_utts": len(corpus.dev_features), "text_sents": len(corpus.text),
            "units": len(inv), "out": str(out)}


def cmd_phonemize(args) -> dict:
    sentences = textproc.read_sentences(args.text)
    if args.lexicon:
        lex = textproc.load_lexicon(args.lexicon)
    else:
        lex = textproc.letter_lexicon({w for s in sentences for w in s})
    inv = UnitInventory.from_lexicon(lex)
    rng = np.random.default_rng(args.seed)
    seqs = [textproc.phonemize(s, lex, inv, args.p_sil, rng) for s in sentences]
    textproc.write_transcripts(args.out, seqs, inv)
    if args.units_out:
        _save_units(args.units_out, inv)
    return {"command": "phonemize", "sentences": len(seqs), "units": len(inv),
            "out": str(args.out)}


def cmd_lm(args) -> dict:
    inv = _load_units(args.units)
    seqs = textproc.read_transcripts(args.text, inv)
    if args.strip_silence:
        seqs = [s[s != inv.sil_id] for s in seqs]
    lm = textproc.train_ngram(seqs, order=args.order, alpha=args.alpha,
                              vocab_size=len(inv))
    textproc.save_ngram(args.out, lm, inv)
    nll = float(np.mean([textproc.lm_nll(lm, s) for s in seqs if len(s)]))
    return {"command": "lm", "order": lm.order, "alpha": lm.alpha,
            "sentences": len(seqs), "train_nll": nll, "out": str(args.out)}


def cmd_train(args) -> dict:
    inv = _load_units(args.units)
    audio = _load_feature_dir(args.features)
    pseudo = quantizer.load_labels(args.pseudo)
    text = textproc.read_transcripts(args.text, inv)
    cfg_kw = _load_config(args.config)
    preset = cfg_kw.pop("weight_preset", None)
    gen_kw = cfg_kw.pop("generator", {})
    disc_kw = cfg_kw.pop("discriminator", {})
    if args.seed is not None:
        cfg_kw["seed"] = args.seed
    if preset:
        cfg_kw["weights"] = LossWeights.preset(preset)
    cfg = TrainConfig.desk(**cfg_kw) if args.desk else TrainConfig(**cfg_kw)
    if args.steps is not None:
        cfg.total_steps = args.steps
    aux_classes = int(max(int(p.max()) for p in pseudo)) + 1
    rng = np.random.default_rng(cfg.seed)
    gen = Generator(GeneratorConfig(in_dim=audio[0].shape[1], vocab=len(inv),
                                    aux_classes=aux_classes, **gen_kw), rng)
    disc = Discriminator(DiscriminatorConfig(vocab=len(inv), **disc_kw), rng)
    trainer = Trainer(cfg, gen, disc, audio, pseudo, text, out_dir=args.out)
    trainer.train()
    return {"command": "train", "steps": trainer.step, "utts": len(audio),
            "seed": cfg.seed, "out": str(args.out)}


def _load_generator(ckpt_path) -> tuple[Generator, dict]:
    gen, _, header, _ = load_checkpoint(ckpt_path)
    return gen, header


def cmd_decode(args) -> dict:
    inv = _load_units(args.units)
    gen, header = _load_generator(args.ckpt)
    feats = _load_feature_dir(args.features)
    lm = None
    if args.lm:
        lm, _ = textproc.load_ngram(args.lm)
    strip = not args.keep_silence
    hyps = []
    for frames in feats:
        logits, _ = gen.forward(frames, stride_override=args.stride, with_aux=False)
        if lm is None:
            hyps.append(greedy_decode(logits.data, inv, strip_silence=strip))
        else:
            hyps.append(beam_decode(logits.data, inv, lm, beam_width=args.beam_width,
                                    lm_weight=args.lm_weight, strip_silence=strip))
    textproc.write_transcripts(args.out, hyps, inv)
    return {"command": "decode", "utts": len(hyps), "ckpt_step": header["step"],
            "beam": bool(lm), "out": str(args.out)}


def cmd_eval(args) -> dict:
    inv = _load_units(args.units)
    refs = textproc.read_transcripts(args.refs, inv)
    hyps = textproc.read_transcripts(args.hyps, inv)
    refs = [r[r != inv.sil_id] for r in refs]
    hyps = [h[h != inv.sil_id] for h in hyps]
    result = per(refs, hyps)
    return {"command": "eval", **result}


def cmd_select(args) -> dict:
    inv = _load_units(args.units)
    feats = _load_feature_dir(args.features)
    lm, _ = textproc.load_ngram(args.lm)
    ckpts = sorted(Path(args.ckpt_dir).glob("*.ckpt"))
    if not ckpts:
        raise FormatError(f"no .ckpt files in {args.ckpt_dir}")
    ranked = []
    for c in ckpts:
        gen, header = _load_generator(c)
        score = selection_metric(gen, feats, lm, inv, mu=args.mu, stride=args.stride)
        ranked.append({"ckpt": str(c), "step": header["step"], "score": score})
    ranked.sort(key=lambda r: r["score"])
    if args.pretty:
        for r in ranked:
            print(f"  {r['score']:10.4f}  step {r['step']:7d}  {r['ckpt']}")
    return {"command": "select", "best": ranked[0]["ckpt"],
            "best_score": ranked[0]["score"], "ranked": ranked}


def cmd_selftest(args) -> dict:
    from . import autodiff as ad
    from . import objectives as obj
    from .model import merge_consecutive

    rng = np.random.default_rng(0)
    gen = Generator(GeneratorConfig(in_dim=5, hidden=6, vocab=4, aux_classes=5),
                    rng, dtype=np.float64)
    disc = Discriminator(DiscriminatorConfig(vocab=4, hidden=5), rng,
                         dtype=np.float64)
    frames = rng.normal(size=(15, 5))
    pseudo = rng.integers(0, 5, size=15)
    text = [rng.integers(0, 4, size=6)]
    batch = obj.Batch(audio=[frames], pseudo=[pseudo], text=text)
    worst = 0.0
    checks = 0

    def loss_pair():
        return obj.total_losses(batch, gen, disc, LossWeights(),
                                np.random.default_rng(1))

    for params in (gen.params, disc.params):
        for name, p in params.items():
            l_d, l_g, _ = loss_pair()
            target = l_d if params is disc.params else l_g
            analytic = ad.grad(target, [p])[0]
            flat = p.data.reshape(-1)
            idx = rng.choice(flat.size, size=min(3, flat.size), replace=False)
            for i in idx:
                h = 1e-6 * max(1.0, abs(flat[i]))
                orig = flat[i]
                flat[i] = orig + h
                up_d, up_g, _ = loss_pair()
                flat[i] = orig - h
                dn_d, dn_g, _ = loss_pair()
                flat[i] = orig
                up = up_d if params is disc.params else up_g
                dn = dn_d if params is disc.params else dn_g
                fd = (up.item() - dn.item()) / (2 * h)
                an = analytic.reshape(-1)[i]
                rel = abs(an - fd) / max(1.0, abs(an), abs(fd))
                worst = max(worst, rel)
                checks += 1
    ok = worst <= 1e-4
    if not ok:
        raise UasrError(f"gradient selftest failed: worst relative error {worst:.2e}")
    return {"command": "selftest", "suite": args.suite, "checks": checks,
            "worst_rel_err": worst, "passed": True}


# --- argument wiring ------------------------------------------------------


def build_parser() -> _Parser:
    p = _Parser(prog="uasr", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--seed", type=int, default=None)
        sp.add_argument("--pretty", action="store_true")
        sp.add_argument("--threads", type=int, default=None,
                        help="cap numeric library threads")

    sp = sub.add_parser("featurize", help="WAV files to feature files")
    sp.add_argument("--in", dest="input", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--config", help="JSON MFCC settings")
    sp.add_argument("--remove-silence", action="store_true")
    common(sp)
    sp.set_defaults(func=cmd_featurize)

    sp = sub.add_parser("cluster", help="fit a k-means codebook on features")
    sp.add_argument("--features", required=True)
    sp.add_argument("--k", type=int, default=64)
    sp.add_argument("--out", required=True)
    sp.add_argument("--labels-out")
    common(sp)
    sp.set_defaults(func=cmd_cluster, seed=0)

    sp = sub.add_parser("synth", help="generate the synthetic benchmark corpus")
    sp.add_argument("--out", required=True)
    sp.add_argument("--config", help="JSON corpus settings")
    common(sp)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("phonemize", help="word sentences to unit transcripts")
    sp.add_argument("--text", required=True)
    sp.add_argument("--lexicon")
    sp.add_argument("--out", required=True)
    sp.add_argument("--units-out")
    sp.add_argument("--p-sil", type=float, default=0.5)
    common(sp)
    sp.set_defaults(func=cmd_phonemize, seed=0)

    sp = sub.add_parser("lm", help="train the add-alpha n-gram model")
    sp.add_argument("--text", required=True)
    sp.add_argument("--units", required=True)
    sp.add_argument("--order", type=int, default=2)
    sp.add_argument("--alpha", type=float, default=0.01)
    sp.add_argument("--strip-silence", action="store_true")
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(func=cmd_lm)

    sp = sub.add_parser("train", help="adversarial training")
    sp.add_argument("--features", required=True)
    sp.add_argument("--pseudo", required=True)
    sp.add_argument("--text", required=True)
    sp.add_argument("--units", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--config", help="JSON training settings")
    sp.add_argument("--desk", action="store_true",
                    help="small-budget preset (5000 steps, batch 32)")
    sp.add_argument("--steps", type=int, default=None)
    common(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("decode", help="decode features with a checkpoint")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--features", required=True)
    sp.add_argument("--units", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--stride", type=int, default=None)
    sp.add_argument("--lm", help="enable beam search with this model")
    sp.add_argument("--beam-width", type=int, default=8)
    sp.add_argument("--lm-weight", type=float, default=1.0)
    sp.add_argument("--keep-silence", action="store_true")
    common(sp)
    sp.set_defaults(func=cmd_decode)

    sp = sub.add_parser("eval", help="phoneme error rate between transcripts")
    sp.add_argument("--refs", required=True)
    sp.add_argument("--hyps", required=True)
    sp.add_argument("--units", required=True)
    common(sp)
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("select", help="rank checkpoints by the proxy metric")
    sp.add_argument("--ckpt-dir", required=True)
    sp.add_argument("--features", required=True)
    sp.add_argument("--lm", required=True)
    sp.add_argument("--units", required=True)
    sp.add_argument("--mu", type=float, default=1.0)
    sp.add_argument("--stride", type=int, default=None)
    common(sp)
    sp.set_defaults(func=cmd_select)

    sp = sub.add_parser("selftest", help="built-in verification suites")
    sp.add_argument("suite", choices=["grad"])
    common(sp)
    sp.set_defaults(func=cmd_selftest)

    return p


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("UASR_LOG", "WARNING").upper())
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if getattr(args, "threads", None):
        os.environ["OMP_NUM_THREADS"] = str(args.threads)
    try:
        summary = args.func(args)
    except (FormatError, UnsupportedFormatError, OSError) as e:
        log.error("%s", e)
        print(json.dumps({"command": args.command, "error": str(e)}))
        return EXIT_IO
    except UasrError as e:
        log.error("%s", e)
        print(json.dumps({"command": args.command, "error": str(e)}))
        return EXIT_CONTRACT
    _emit(summary, pretty=getattr(args, "pretty", False))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
