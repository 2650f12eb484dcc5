"""Command-line front end.

Commands:

- ``train``       fit a model and write it as a TWNET file
- ``ternarize``   freeze a trained model at a weight threshold
- ``infer``       run one PGM frame through the simulated array
- ``eval``        threshold sweep with accuracy/cost CSV output
- ``gen-car``     write synthetic car scenes as PGM plus a target CSV
- ``dump-plane``  dump register planes mid-pipeline as PGM images

Exit codes: 0 success, 1 usage error, 2 data error (missing or malformed
files), 3 internal invariant violation.  ``PPACNN_SEED`` supplies the
seed when ``--seed`` is absent.  All commands are deterministic for a
fixed seed, and output files are written atomically.
"""

import argparse
import dataclasses
import os
import sys
import traceback
from dataclasses import dataclass

import numpy as np

from . import data as datasets
from . import inference
from . import network
from .core import ArrayState, read_pgm, write_pgm

SWEEP_EPS = 1e-9


class UsageError(Exception):
    """Bad flags or flag values; maps to exit code 1."""


@dataclass
class RunConfig:
    command: str
    task: str = "mnist"
    data: str = None        # MNIST directory
    model: str = None       # input model path
    image: str = None       # input PGM path
    out: str = None         # output file
    out_dir: str = None     # output directory
    alphas: tuple = ()      # one threshold or an inclusive sweep
    seed: int = None        # resolved from --seed or PPACNN_SEED
    epochs: int = None      # train-time overrides, None = config default
    batch_size: int = None
    lr: float = None
    scenes: int = None
    limit: int = None       # eval image cap
    count: int = None       # gen-car scene count
    stage: str = None       # dump-plane pipeline stage


def parse_sweep(text):
    """start:end:step, bounds in [0, 1], end inclusive within epsilon."""
    parts = text.split(":")
    if len(parts) != 3:
        raise UsageError("sweep must be start:end:step, got %r" % text)
    try:
        start, end, step = (float(p) for p in parts)
    except ValueError:
        raise UsageError("non-numeric sweep component in %r" % text)
    if step <= 0:
        raise UsageError("sweep step must be positive")
    if not (0.0 <= start <= end <= 1.0):
        raise UsageError("sweep bounds must satisfy 0 <= start <= end <= 1")
    vals = []
    i = 0
    while start + i * step <= end + SWEEP_EPS:
        vals.append(round(start + i * step, 9))
        i += 1
    return tuple(vals)


def _parse_alpha(text):
    try:
        v = float(text)
    except ValueError:
        raise UsageError("alpha must be a number, got %r" % text)
    if not 0.0 <= v <= 1.0:
        raise UsageError("alpha must lie in [0, 1]")
    return v


def _resolve_seed(explicit):
    if explicit is not None:
        return explicit
    env = os.environ.get("PPACNN_SEED")
    if env:
        try:
            return int(env)
        except ValueError:
            raise UsageError("PPACNN_SEED must be an integer, got %r" % env)
    return None


def _build_parser():
    p = argparse.ArgumentParser(prog="ppacnn",
                                description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a model, write TWNET")
    t.add_argument("--task", choices=network.TASKS, default="mnist")
    t.add_argument("--data", help="MNIST directory (mnist task)")
    t.add_argument("--out", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch", type=int, dest="batch_size")
    t.add_argument("--lr", type=float)
    t.add_argument("--scenes", type=int, help="car training scene count")

    z = sub.add_parser("ternarize", help="freeze a model at a threshold")
    z.add_argument("--model", required=True)
    z.add_argument("--alpha", required=True)
    z.add_argument("--out", required=True)

    i = sub.add_parser("infer", help="classify one PGM frame")
    i.add_argument("--model", required=True, help="TWNET-T file")
    i.add_argument("--image", required=True, help="64x64 or 256x256 PGM")

    e = sub.add_parser("eval", help="threshold sweep, CSV output")
    e.add_argument("--task", choices=network.TASKS, default="mnist")
    e.add_argument("--model", required=True, help="TWNET file")
    e.add_argument("--data", help="MNIST directory (mnist task)")
    e.add_argument("--alpha")
    e.add_argument("--alpha-sweep", dest="alpha_sweep")
    e.add_argument("--limit", type=int, default=1000,
                   help="test images per threshold (mnist)")
    e.add_argument("--scenes", type=int, default=100)
    e.add_argument("--seed", type=int)
    e.add_argument("--out", required=True)

    g = sub.add_parser("gen-car", help="write car scenes as PGM + CSV")
    g.add_argument("--count", type=int, default=20)
    g.add_argument("--seed", type=int)
    g.add_argument("--out-dir", dest="out_dir", required=True)

    d = sub.add_parser("dump-plane", help="dump register planes as PGM")
    d.add_argument("--model", required=True, help="TWNET-T file")
    d.add_argument("--image", required=True, help="64x64 or 256x256 PGM")
    d.add_argument("--stage", default="pooled",
                   help="encoded, stored:K, or pooled")
    d.add_argument("--out-dir", dest="out_dir", required=True)

    return p


def parse_args(argv):
    args = _build_parser().parse_args(argv)
    alphas = ()
    if getattr(args, "alpha_sweep", None) and getattr(args, "alpha", None):
        raise UsageError("--alpha and --alpha-sweep are mutually exclusive")
    if getattr(args, "alpha_sweep", None):
        alphas = parse_sweep(args.alpha_sweep)
    elif getattr(args, "alpha", None) is not None:
        alphas = (_parse_alpha(args.alpha),)
    stage = getattr(args, "stage", None)
    if stage is not None:
        valid = {"encoded", "pooled"} | {"stored:%d" % k for k in range(16)}
        if stage not in valid:
            raise UsageError("stage must be encoded, stored:K (K in 0..15), "
                             "or pooled")
    cfg = RunConfig(
        command=args.command,
        task=getattr(args, "task", "mnist"),
        data=getattr(args, "data", None),
        model=getattr(args, "model", None),
        image=getattr(args, "image", None),
        out=getattr(args, "out", None),
        out_dir=getattr(args, "out_dir", None),
        alphas=alphas,
        seed=_resolve_seed(getattr(args, "seed", None)),
        epochs=getattr(args, "epochs", None),
        batch_size=getattr(args, "batch_size", None),
        lr=getattr(args, "lr", None),
        scenes=getattr(args, "scenes", None),
        limit=getattr(args, "limit", None),
        count=getattr(args, "count", None),
        stage=stage,
    )
    if cfg.command == "eval" and not cfg.alphas:
        raise UsageError("eval needs --alpha or --alpha-sweep")
    if cfg.command in ("train", "eval") and cfg.task == "mnist" \
            and not cfg.data:
        raise UsageError("%s --task mnist needs --data" % cfg.command)
    return cfg


# -- commands -----------------------------------------------------------------------


def _train_config(cfg):
    overrides = {k: v for k, v in (("seed", cfg.seed),
                                   ("epochs", cfg.epochs),
                                   ("batch_size", cfg.batch_size),
                                   ("lr", cfg.lr),
                                   ("scenes", cfg.scenes)) if v is not None}
    return dataclasses.replace(network.TrainConfig(), **overrides)


def cmd_train(cfg):
    tc = _train_config(cfg)

    def progress(epoch, loss):
        print("epoch %d  mean loss %.4f" % (epoch, loss), flush=True)

    model = network.train(cfg.task, tc, mnist_root=cfg.data,
                          progress=progress)
    network.save_model(model, cfg.out)
    if cfg.task == "mnist":
        images, labels = datasets.load_mnist(cfg.data, "test")
        placed = np.stack([datasets.place_canonical(im.astype(np.float64))
                           for im in images[:2000]])
        acc = network.evaluate_float(model, placed, labels[:2000])
        print("float accuracy on %d test images: %.4f" % (len(placed), acc))
    else:
        rng = np.random.default_rng([tc.seed, 100])
        scenes = [datasets.gen_car_scene(rng) for _ in range(200)]
        acts = network.forward(model, model.conv_real,
                               np.stack([s.image for s in scenes]))
        err = np.mean([inference.bin_error(a, s.bin_x, s.bin_y)
                       for a, s in zip(acts, scenes)])
        print("float mean bin error on 200 scenes: %.3f" % err)
    print("model written: %s" % cfg.out)
    return 0


def cmd_ternarize(cfg):
    if len(cfg.alphas) != 1:
        raise UsageError("ternarize needs exactly one --alpha")
    model = network.load_model(cfg.model)
    tern = inference.ternarize(model, cfg.alphas[0])
    inference.save_ternarized(tern, cfg.out)
    print("ternarized model written: %s (nnz %d/%d)"
          % (cfg.out, tern.nnz, model.conv_real.size))
    return 0


def _load_frame(path):
    img = read_pgm(path).astype(np.int64)
    if img.shape == (64, 64):
        return img
    if img.shape == (256, 256):
        extracted = inference.extract_character(img.astype(np.float64))
        return np.rint(extracted).astype(np.int64)
    raise datasets.DataError("%s: expected a 64x64 or 256x256 PGM, got %dx%d"
                             % (path, img.shape[0], img.shape[1]))


def cmd_infer(cfg):
    tern = inference.load_ternarized(cfg.model)
    frame = _load_frame(cfg.image)
    acts, cost = inference.infer_frame(tern, frame, ArrayState(256, 256))
    print("activations: " + " ".join("%.6g" % v for v in acts))
    if tern.task == "mnist":
        print("predicted digit: %d" % int(acts.argmax()))
    else:
        print("predicted bins: %d %d"
              % (int(acts[:20].argmax()), int(acts[20:].argmax())))
    print("instructions: %d" % sum(cost.values()))
    return 0


def cmd_eval(cfg):
    model = network.load_model(cfg.model)
    if model.task != cfg.task:
        raise datasets.DataError("model is for task %r, not %r"
                                 % (model.task, cfg.task))
    if cfg.task == "mnist":
        images, labels = datasets.load_mnist(cfg.data, "test")
        n = min(cfg.limit or len(images), len(images))
        reports = inference.eval_mnist(model, cfg.alphas,
                                       (images[:n], labels[:n]))
    else:
        rng = np.random.default_rng(cfg.seed if cfg.seed is not None else 0)
        reports = inference.eval_car(model, cfg.alphas, cfg.scenes, rng)
    network.atomic_write_text(cfg.out, inference.reports_csv(reports))
    for r in reports:
        print("alpha %g  metric %.4f  instructions/frame %.0f"
              % (r.alpha, r.metric, r.instructions_per_frame))
    print("sweep written: %s" % cfg.out)
    return 0


def cmd_gen_car(cfg):
    os.makedirs(cfg.out_dir, exist_ok=True)
    rng = np.random.default_rng(cfg.seed if cfg.seed is not None else 0)
    rows = ["index,bin_x,bin_y"]
    for i in range(cfg.count):
        scene = datasets.gen_car_scene(rng)
        path = os.path.join(cfg.out_dir, "scene_%04d.pgm" % i)
        tmp = path + ".tmp"
        write_pgm(tmp, scene.image.astype(np.uint8))
        os.replace(tmp, path)
        rows.append("%d,%d,%d" % (i, scene.bin_x, scene.bin_y))
    network.atomic_write_text(os.path.join(cfg.out_dir, "targets.csv"),
                              "\n".join(rows) + "\n")
    print("%d scenes written under %s" % (cfg.count, cfg.out_dir))
    return 0


def cmd_dump_plane(cfg):
    tern = inference.load_ternarized(cfg.model)
    frame = _load_frame(cfg.image)
    os.makedirs(cfg.out_dir, exist_ok=True)
    state = ArrayState(256, 256)
    names = ["d%d" % i for i in range(13)] + ["a%d" % i for i in range(7)]
    written = []

    def hook(label):
        if label != cfg.stage:
            return
        tag = label.replace(":", "_")
        for name in names:
            path = os.path.join(cfg.out_dir, "%s_%s.pgm" % (tag, name))
            tmp = path + ".tmp"
            state.dump_pgm(name, tmp)
            os.replace(tmp, path)
            written.append(path)

    inference.infer_frame(tern, frame, state, trace=hook)
    if not written:
        raise UsageError("stage %r never fired" % cfg.stage)
    print("%d planes written under %s" % (len(written), cfg.out_dir))
    return 0


COMMANDS = {
    "train": cmd_train,
    "ternarize": cmd_ternarize,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "gen-car": cmd_gen_car,
    "dump-plane": cmd_dump_plane,
}


def main(argv=None):
    try:
        cfg = parse_args(argv)
    except UsageError as exc:
        print("usage error: %s" % exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # argparse: remap its exit(2) to usage=1
        return 0 if exc.code in (0, None) else 1
    try:
        return COMMANDS[cfg.command](cfg)
    except UsageError as exc:
        print("usage error: %s" % exc, file=sys.stderr)
        return 1
    except (datasets.DataError, network.ModelFormatError,
            inference.ExtractionError, OSError, ValueError) as exc:
        print("error: %s" % exc, file=sys.stderr)
        return 2
    except Exception:
        traceback.print_exc()
        return 3


if __name__ == "__main__":
    sys.exit(main())
