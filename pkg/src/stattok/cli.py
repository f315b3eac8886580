"""Single executable covering the whole pipeline: data generation,
two-stage tokenizer training, AR training, tokenization, reconstruction,
generation, evaluation, and profile export.

Exit codes: 0 success, 1 usage error, 2 config/validation error,
3 runtime error; failures print one machine-parseable line on stderr.
"""

from __future__ import annotations

import os as _os

_threads = _os.environ.get("STAT_THREADS")
if _threads:  # must land before numpy loads its BLAS
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)

import argparse
import os
import sys

import numpy as np

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


class _UsageExit(Exception):
    def __init__(self, message):
        self.message = message


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageExit(message)


def _build_parser() -> _Parser:
    p = _Parser(prog="stattok", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write PPM train/eval splits plus manifests")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)

    for name in ("train-stage1", "train-stage2", "train-ar"):
        t = sub.add_parser(name)
        t.add_argument("--config", required=True)
        t.add_argument("--out", required=True)
        t.add_argument("--seed", type=int, default=0)
        t.add_argument("--log", default=None, help="training-log CSV (default: <out>.log.csv)")
        if name == "train-stage2":
            t.add_argument("--init", required=True, help="stage-1 checkpoint")
        if name == "train-ar":
            t.add_argument("--tokenizer", required=True, help="stage-2 tokenizer checkpoint")

    tk = sub.add_parser("tokenize", help="per-image codes, kept count, T, and profile as CSV")
    tk.add_argument("--tokenizer", required=True)
    tk.add_argument("--images", required=True)
    tk.add_argument("--policy", default="threshold:0.5")
    tk.add_argument("--out", required=True)

    rc = sub.add_parser("reconstruct", help="decode images under a dropping policy")
    rc.add_argument("--tokenizer", required=True)
    rc.add_argument("--images", required=True)
    rc.add_argument("--policy", default="threshold:0.5")
    rc.add_argument("--out", required=True)

    gen = sub.add_parser("generate", help="sample the AR model and decode to PPM")
    gen.add_argument("--tokenizer", required=True)
    gen.add_argument("--ar", required=True)
    gen.add_argument("--class", dest="class_id", type=int, required=True)
    gen.add_argument("--n", type=int, default=8)
    gen.add_argument("--guidance", type=float, default=1.5)
    gen.add_argument("--temperature", type=float, default=1.0)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True)

    ev = sub.add_parser("eval", help="EvalReport JSON plus per-sample CSV")
    ev.add_argument("--tokenizer", required=True)
    ev.add_argument("--images", required=True)
    ev.add_argument("--policy", default="threshold:0.5")
    ev.add_argument("--out", required=True)

    ex = sub.add_parser("export-profiles", help="keep-probability profiles as CSV")
    ex.add_argument("--tokenizer", required=True)
    ex.add_argument("--images", required=True)
    ex.add_argument("--out", required=True)
    return p


def _load_train_data(cfg):
    from . import data
    if cfg.data.dir is not None:
        return data.load_ppm_dir(cfg.data.dir)
    return data.generate_synthetic(cfg.data.seed, cfg.data.n_train, cfg.data.image_size,
                                   cfg.data.num_classes, cfg.tokenizer.patch_size)


def _cmd_gen_data(args) -> int:
    from . import data
    from .config import load_config
    cfg = load_config(args.config)
    train = data.generate_synthetic(cfg.data.seed, cfg.data.n_train, cfg.data.image_size,
                                    cfg.data.num_classes, cfg.tokenizer.patch_size)
    evalset = data.generate_synthetic(cfg.data.seed, cfg.data.n_eval, cfg.data.image_size,
                                      cfg.data.num_classes, cfg.tokenizer.patch_size,
                                      start_index=cfg.data.n_train)
    data.save_dataset(os.path.join(args.out, "train"), train)
    data.save_dataset(os.path.join(args.out, "eval"), evalset)
    print(f"wrote {len(train)} train + {len(evalset)} eval images under {args.out}")
    return EXIT_OK


def _cmd_train_stage1(args) -> int:
    from .config import load_config
    from .trainer import train_stage1
    cfg = load_config(args.config)
    log = args.log or args.out + ".log.csv"
    train_stage1(cfg.tokenizer, cfg.trainer, cfg.losses, _load_train_data(cfg),
                 args.seed, args.out, log)
    print(f"stage-1 checkpoint written to {args.out}")
    return EXIT_OK


def _cmd_train_stage2(args) -> int:
    from .config import load_config
    from .trainer import train_stage2
    cfg = load_config(args.config)
    log = args.log or args.out + ".log.csv"
    train_stage2(cfg.tokenizer, cfg.trainer, cfg.losses, args.init, _load_train_data(cfg),
                 args.seed, args.out, log)
    print(f"stage-2 checkpoint written to {args.out}")
    return EXIT_OK


def _cmd_train_ar(args) -> int:
    from .ar import TokenizedCorpus, train_ar
    from .config import load_config
    from .model import encode_corpus
    from .trainer import load_tokenizer_auto
    cfg = load_config(args.config)
    tok = load_tokenizer_auto(args.tokenizer)
    ds = _load_train_data(cfg)
    codes, probs = encode_corpus(tok, ds.pixels, cfg.eval.batch_size)
    corpus = TokenizedCorpus(codes, probs, ds.labels)
    log = args.log or args.out + ".log.csv"
    train_ar(cfg.ar, corpus, tok.cfg.codebook_size, cfg.data.num_classes,
             tok.cfg.latent_len, args.seed, args.out, log)
    print(f"AR checkpoint written to {args.out}")
    return EXIT_OK


def _eval_inputs(args):
    from .allocation import InferencePolicy
    from .data import load_ppm_dir
    from .trainer import load_tokenizer_auto
    model = load_tokenizer_auto(args.tokenizer)
    ds = load_ppm_dir(args.images)
    policy = InferencePolicy.parse(args.policy) if hasattr(args, "policy") else None
    return model, ds, policy


def _cmd_tokenize(args) -> int:
    from .evaluate import token_complexity_analysis, write_tokens_csv
    model, ds, policy = _eval_inputs(args)
    _, table = token_complexity_analysis(model, ds, policy)
    write_tokens_csv(args.out, table)
    print(f"tokenized {len(ds)} images -> {args.out}")
    return EXIT_OK


def _cmd_reconstruct(args) -> int:
    from . import data
    from .allocation import apply_policy
    from .model import decode_codes, encode_corpus
    model, ds, policy = _eval_inputs(args)
    codes, probs = encode_corpus(model, ds.pixels)
    mask = apply_policy(probs, policy)
    x_hat = decode_codes(model, codes, mask)
    os.makedirs(args.out, exist_ok=True)
    for i in range(len(ds)):
        data.write_ppm(os.path.join(args.out, f"{ds.ids[i]:06d}.ppm"), x_hat[i])
    print(f"reconstructed {len(ds)} images -> {args.out}")
    return EXIT_OK


def _cmd_generate(args) -> int:
    from . import data
    from .allocation import prefix_mask
    from .ar import load_ar_auto, sample
    from .model import decode_codes
    from .trainer import derive_rng, load_tokenizer_auto
    tok = load_tokenizer_auto(args.tokenizer)
    ar_model = load_ar_auto(args.ar)
    if not (0 <= args.class_id < ar_model.num_classes):
        raise ValueError(f"class {args.class_id} outside [0, {ar_model.num_classes})")
    if args.temperature < 0:
        raise ValueError(f"temperature must be >= 0, got {args.temperature}")
    os.makedirs(args.out, exist_ok=True)
    seq_len = tok.cfg.latent_len
    lines = ["sample_id,class,k,codes"]
    for i in range(args.n):
        rng = derive_rng(args.seed, 0x6E0, i)
        seq = sample(ar_model, args.class_id, args.temperature, args.guidance, rng)
        codes = np.zeros((1, seq_len), dtype=np.int64)
        codes[0, :seq.eos_pos] = seq.codes
        img = decode_codes(tok, codes, prefix_mask(np.asarray([seq.eos_pos]), seq_len))[0]
        data.write_ppm(os.path.join(args.out, f"gen_{args.class_id:03d}_{i:04d}.ppm"), img)
        lines.append(f"{i},{args.class_id},{seq.eos_pos}," + ",".join(str(c) for c in seq.codes))
    tmp = os.path.join(args.out, "tokens.csv.tmp")
    with open(tmp, "w") as f:
        f.write("\n".join(lines) + "\n")
    os.replace(tmp, os.path.join(args.out, "tokens.csv"))
    print(f"generated {args.n} samples of class {args.class_id} -> {args.out}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    from .evaluate import token_complexity_analysis, write_per_sample_csv, write_report_json
    model, ds, policy = _eval_inputs(args)
    report, table = token_complexity_analysis(model, ds, policy)
    write_report_json(args.out, report)
    stem = os.path.splitext(args.out)[0]
    write_per_sample_csv(stem + ".samples.csv", table)
    print(f"eval report -> {args.out} (mean_mse {report.mean_mse:.5f}, "
          f"mean_tokens {report.mean_tokens:.2f}, pearson {report.pearson_tokens_vs_proxy:.3f})")
    return EXIT_OK


def _cmd_export_profiles(args) -> int:
    from .evaluate import write_profiles_csv
    from .model import encode_corpus
    model, ds, _ = _eval_inputs(args)
    _, probs = encode_corpus(model, ds.pixels)
    write_profiles_csv(args.out, ds.ids, probs)
    print(f"profiles for {len(ds)} images -> {args.out}")
    return EXIT_OK


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train-stage1": _cmd_train_stage1,
    "train-stage2": _cmd_train_stage2,
    "train-ar": _cmd_train_ar,
    "tokenize": _cmd_tokenize,
    "reconstruct": _cmd_reconstruct,
    "generate": _cmd_generate,
    "eval": _cmd_eval,
    "export-profiles": _cmd_export_profiles,
}


def main(argv=None) -> int:
    from .allocation import PolicyError
    from .checkpoint import CheckpointError
    from .config import ConfigError
    from .data import DataError
    try:
        args = _build_parser().parse_args(argv)
    except _UsageExit as exc:
        print(f"stattok: usage-error: {exc.message}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, PolicyError, DataError, CheckpointError, ValueError) as exc:
        print(f"stattok: config-error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"stattok: runtime-error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - last-resort CLI boundary
        print(f"stattok: runtime-error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
