"""Command-line surface: train, prune, compress, decompress, eval, bdrate, rrl, report.

Exit codes: 0 ok, 1 usage, 2 data error, 3 decode error.
"""

from __future__ import annotations

import argparse
import copy
import logging
import sys
from pathlib import Path
from typing import Sequence

import pandas as pd

from evc.checkpoint import load_checkpoint, save_checkpoint
from evc.config import (
    TrainConfig,
    load_distill_config,
    load_eval_config,
    load_scalable_config,
    load_train_config,
    parse_distill_code,
)
from evc.data import load_split
from evc.entropy import Bitstream
from evc.errors import DecodeError, EVCError, ValidationError
from evc.imageio import list_images, read_image, to_batch, to_pixels, write_image
from evc.mask_decay import write_prune_report
from evc.metrics import (
    REPORT_FIELDS,
    RDCurve,
    bd_rate,
    bpp,
    evaluate_corpus,
    pad64,
    read_curves,
    relative_improvement,
    write_curves,
)
from evc.model import compress, decompress
from evc.scalable import (
    EncoderBank,
    ensemble_curves,
    ensemble_encode,
    ensemble_report,
    mean_scores,
    train_end_to_end,
    train_rrl_step,
    train_separate,
    write_ensemble_report,
)
from evc.tables import write_frame
from evc.training import decay_rate_sweep, distill_pipeline, overlap_study, train

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_DECODE = 3

logger = logging.getLogger(__name__)


def cmd_train(args: argparse.Namespace) -> int:
    job = load_train_config(Path(args.config))
    model = job.model.build()
    dataset, _ = load_split(job.dataset, model.dtype)
    result = train(model, job.train, dataset, metrics_path=job.metrics)
    save_checkpoint(job.checkpoint, result.model)
    print(f"Wrote {job.checkpoint} and {job.metrics} (status={result.status})")
    return EXIT_OK if result.status == "ok" else EXIT_DATA


def _which(code_enc, code_dec, teacher) -> str | None:
    enc_differs = code_enc.widths[: teacher.num_stages] != teacher.enc_scheme.widths[: teacher.num_stages]
    dec_differs = code_dec.widths[: teacher.num_stages] != teacher.dec_scheme.widths[: teacher.num_stages]
    if enc_differs and dec_differs:
        return "both"
    if enc_differs:
        return "encoder"
    if dec_differs:
        return "decoder"
    return None


def cmd_prune(args: argparse.Namespace) -> int:
    job = load_distill_config(Path(args.config))
    teacher = load_checkpoint(job.teacher)
    dataset, held = load_split(job.dataset, teacher.dtype)
    holdout = held.center_crops() if held is not None else None
    out = job.output_dir
    rows = []
    for code in job.configs:
        enc, dec = parse_distill_code(code, job.model.width_divisor)
        which = _which(enc, dec, teacher)
        if which is None:
            print(f"Skip {code}: same widths as the teacher")
            continue
        result = distill_pipeline(
            teacher,
            enc,
            which,
            job.train,
            dataset,
            job.decay,
            model_cfg=job.model,
            holdout=holdout,
            decoder_scheme=dec,
            output_dir=out / code,
        )
        save_checkpoint(out / code / "student.evck", result.student)
        if result.baseline is not None:
            save_checkpoint(out / code / "baseline.evck", result.baseline)
        write_prune_report(out / code / "prune_report.yaml", result.masked)
        rows.append({"config": code, **result.report})
        print(f"Wrote {out / code}")
    if rows:
        frame = pd.DataFrame(rows)
        write_frame(out / "distill_summary.csv", frame)
        print(frame.to_markdown(index=False, floatfmt=".4f"))
    if args.sweep:
        if not job.sweep_etas:
            raise ValidationError("sweep requested but no sweep etas are configured")
        enc, _ = parse_distill_code(job.configs[0], job.model.width_divisor)
        sweep = decay_rate_sweep(teacher, enc, job.sweep_etas, job.sweep_kinds, job.train, dataset, job.decay, holdout)
        write_frame(out / "decay_sweep.csv", sweep)
        print(f"Wrote {out / 'decay_sweep.csv'}")
    if args.overlap:
        enc, _ = parse_distill_code(job.configs[0], job.model.width_divisor)
        table = overlap_study(teacher, enc, job.train, dataset, job.decay, job.overlap_seeds, job.avoid_blocks)
        write_frame(out / "channel_overlap.csv", table)
        print(f"Wrote {out / 'channel_overlap.csv'}")
    return EXIT_OK


def _default_lambda(rate_index: int) -> float:
    lambdas = TrainConfig().lambdas
    if not 0 <= rate_index < len(lambdas):
        raise ValidationError(f"no default lambda for rate index {rate_index}; pass --lam")
    return lambdas[rate_index]


def cmd_compress(args: argparse.Namespace) -> int:
    pixels = read_image(Path(args.input))
    if args.bank:
        bank = EncoderBank.load(Path(args.model))
        image = to_batch(pixels, bank.model.dtype)
        lam = args.lam if args.lam is not None else _default_lambda(args.rate)
        bs, choice = ensemble_encode(image, bank, args.k or len(bank), args.rate, lam)
        print(f"Encoder {choice.winner} chosen out of {len(choice.table)}")
    else:
        model = load_checkpoint(Path(args.model))
        x, size = pad64(to_batch(pixels, model.dtype), model.spatial_multiple)
        bs = compress(x, model, args.rate, size=size)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(bs.to_bytes())
    print(f"Wrote {out} ({bs.num_bytes} bytes, {bpp(bs):.4f} bpp)")
    return EXIT_OK


def cmd_decompress(args: argparse.Namespace) -> int:
    model = EncoderBank.load(Path(args.model)).model if args.bank else load_checkpoint(Path(args.model))
    bs = Bitstream.from_bytes(Path(args.input).read_bytes())
    write_image(Path(args.output), to_pixels(decompress(bs, model)))
    print(f"Wrote {args.output} ({bs.width}x{bs.height})")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    job = load_eval_config(Path(args.config))
    models = {label: load_checkpoint(path) for label, path in job.models.items()}
    report = evaluate_corpus(models, list_images(job.corpus), job.rate_indices)
    out = job.output_dir
    report.write(out / "eval_report.csv")
    curves = report.curves()
    for curve in curves:
        write_curves(out / f"{curve.label}_curve.csv", [curve])
    write_curves(out / "rd_curves.csv", curves)
    print(report.to_markdown())
    if job.anchor_curve is not None:
        anchors = read_curves(job.anchor_curve)
        anchor = next(iter(anchors.values()))
        for curve in curves:
            print(f"BD-rate {curve.label} vs {anchor.label}: {bd_rate(curve, anchor):.2f}%")
    print(f"Wrote {out / 'eval_report.csv'} and {out / 'rd_curves.csv'}")
    return EXIT_OK


def _single_curve(path: Path, label: str | None) -> RDCurve:
    curves = read_curves(path)
    if label is not None:
        if label not in curves:
            raise ValidationError(f"{path} has no curve labelled {label!r}")
        return curves[label]
    if len(curves) != 1:
        raise ValidationError(f"{path} holds {len(curves)} curves; choose one with a label option")
    return next(iter(curves.values()))


def cmd_bdrate(args: argparse.Namespace) -> int:
    test = _single_curve(Path(args.test), args.test_label)
    anchor = _single_curve(Path(args.anchor), args.anchor_label)
    print(f"{bd_rate(test, anchor):.2f}")
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    anchor = _single_curve(Path(args.anchor), None)
    bd = {
        name: bd_rate(_single_curve(Path(path), None), anchor)
        for name, path in (("baseline", args.baseline), ("ours", args.ours), ("teacher", args.teacher))
    }
    rel = relative_improvement(bd["baseline"], bd["ours"], bd["teacher"])
    row = {
        "config": args.label,
        "bd_baseline": bd["baseline"],
        "bd_ours": bd["ours"],
        "bd_teacher": bd["teacher"],
        "relative_improvement_pct": rel,
    }
    if args.output:
        write_frame(Path(args.output), pd.DataFrame([row], columns=REPORT_FIELDS))
    print(f"{rel:.0f}%")
    return EXIT_OK


def _rrl_bank(regime: str, shared, teacher, job) -> EncoderBank:
    student = job.model.scheme(job.student_scheme)
    if regime in ("ours", "one_by_one"):
        bank = EncoderBank(copy.deepcopy(shared))
        dataset, _ = load_split(job.dataset, shared.dtype)
        for _ in range(job.bank_size):
            train_rrl_step(
                bank,
                "masked" if regime == "ours" else "scratch",
                job.train,
                dataset,
                student,
                large_encoder=teacher.encoder,
                decay_cfg=job.decay,
                temperature=job.temperature,
            )
        return bank
    dataset, _ = load_split(job.dataset, shared.dtype)
    if regime == "separate":
        return train_separate(copy.deepcopy(shared), job.bank_size, student, job.train, dataset)
    if regime == "end_to_end":
        return train_end_to_end(shared, job.bank_size, student, job.train, dataset)
    raise ValidationError(f"unknown regime {regime!r}")


def cmd_rrl(args: argparse.Namespace) -> int:
    job = load_scalable_config(Path(args.config))
    teacher = load_checkpoint(job.teacher)
    shared = teacher
    dec = job.model.scheme(job.decoder_scheme)
    if dec.widths[: teacher.num_stages] != teacher.dec_scheme.widths[: teacher.num_stages]:
        dataset, _ = load_split(job.dataset, teacher.dtype)
        shared = distill_pipeline(teacher, dec, "decoder", job.train, dataset, job.decay).student
    paths = list_images(job.eval_corpus)
    out = job.output_dir
    summary = []
    for regime in job.regimes:
        bank = _rrl_bank(regime, shared, teacher, job)
        bank.save(out / f"bank_{regime}.evckb")
        frame = ensemble_report(bank, paths, job.train.rate_indices, job.train.lambdas, job.train.distortion_scale)
        write_ensemble_report(out / f"ensemble_{regime}.csv", frame)
        write_curves(out / f"ensemble_{regime}_curves.csv", ensemble_curves(frame, f"{regime} "))
        for k, score in mean_scores(frame).items():
            summary.append({"regime": regime, "k": k, "mean_score": score})
        print(f"Wrote {out / f'bank_{regime}.evckb'}")
    frame = pd.DataFrame(summary, columns=["regime", "k", "mean_score"])
    write_frame(out / "regime_summary.csv", frame)
    print(frame.pivot_table(index="regime", columns="k", values="mean_score").to_markdown(floatfmt=".4f"))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="evc", description="Neural image codec with mask-decay distillation.")
    parser.add_argument("--verbose", action="store_true", help="Log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="Train a model from scratch")
    p.add_argument("--config", default="config/train.yaml")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("prune", help="Distil a teacher into students with mask decay")
    p.add_argument("--config", default="config/mask_decay.yaml")
    p.add_argument("--sweep", action="store_true", help="Also run the decay-rate sweep")
    p.add_argument("--overlap", action="store_true", help="Also run the chosen-channel overlap study")
    p.set_defaults(func=cmd_prune)

    p = sub.add_parser("compress", help="Encode a PNG/PPM image")
    p.add_argument("--model", required=True)
    p.add_argument("--rate", type=int, default=0)
    p.add_argument("--bank", action="store_true", help="--model is an encoder bank; pick the best encoder")
    p.add_argument("--k", type=int, default=None, help="Number of bank encoders to try")
    p.add_argument("--lam", type=float, default=None, help="Lambda for the ensemble score")
    p.add_argument("input")
    p.add_argument("output")
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("decompress", help="Decode a bitstream to PNG/PPM")
    p.add_argument("--model", required=True)
    p.add_argument("--bank", action="store_true", help="--model is an encoder bank")
    p.add_argument("input")
    p.add_argument("output")
    p.set_defaults(func=cmd_decompress)

    p = sub.add_parser("eval", help="Evaluate models over a corpus")
    p.add_argument("--config", default="config/eval.yaml")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bdrate", help="BD-rate of one RD-curve CSV against another")
    p.add_argument("test")
    p.add_argument("anchor")
    p.add_argument("--test-label", default=None)
    p.add_argument("--anchor-label", default=None)
    p.set_defaults(func=cmd_bdrate)

    p = sub.add_parser("rrl", help="Train encoder banks and compare ensembles")
    p.add_argument("--config", default="config/scalable.yaml")
    p.set_defaults(func=cmd_rrl)

    p = sub.add_parser("report", help="Relative improvement from three curves and an anchor")
    p.add_argument("--anchor", required=True)
    p.add_argument("--baseline", required=True)
    p.add_argument("--ours", required=True)
    p.add_argument("--teacher", required=True)
    p.add_argument("--label", default="")
    p.add_argument("--output", default=None)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s %(message)s")
    try:
        return args.func(args)
    except DecodeError as exc:
        print(f"Decode error: {exc}", file=sys.stderr)
        return EXIT_DECODE
    except (EVCError, FileNotFoundError, KeyError) as exc:
        print(f"Data error: {exc}", file=sys.stderr)
        return EXIT_DATA
