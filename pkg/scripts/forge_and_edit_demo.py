"""End-to-end demo: forge a corpus, train briefly, edit, and evaluate.

Drives the same batch entry points as the ``rfaudio`` command, so the run
doubles as a smoke test of the full pipeline at a desk-friendly operating
point (8 kHz audio, one-second scenes, a one-block model). Every stage is
deterministic under ``--seed``.

Example:

    python scripts/forge_and_edit_demo.py --root demo_workspace --steps 50
"""

import argparse
import json
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from rfaudio.cli import main as cli


def run(argv) -> None:
    print("$ rfaudio " + " ".join(argv))
    rc = cli(argv)
    if rc != 0:
        raise SystemExit(f"step failed with exit code {rc}")


def parse_args(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--root", default="demo_workspace",
                        help="working directory for corpus, checkpoint, audio")
    parser.add_argument("--steps", type=int, default=50, help="training steps")
    parser.add_argument("--items-per-task", type=int, default=2)
    parser.add_argument("--seed", type=int, default=5)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    args = parse_args(argv)
    root = Path(args.root)
    root.mkdir(parents=True, exist_ok=True)

    config = {
        "session_rate": 8000,
        "mel": {"sample_rate": 8000, "n_fft": 256, "hop": 64, "n_mels": 12},
        "forge": {"items_per_task": args.items_per_task, "duration_s": 1.0},
        "model": {
            "d_lat": 12, "d_mel": 12, "d_sync": 1, "d_mm": 4, "d_trans": 4,
            "d_high": 8, "width": 8, "depth": 1, "heads": 2, "mlp_ratio": 2,
            "time_basis": 4,
        },
        "sampler": {"steps": 4},
        "train": {"batch_size": 4},
        "seed": args.seed,
    }
    cfg_path = root / "run.json"
    cfg_path.write_text(json.dumps(config, indent=2))
    print(f"wrote {cfg_path}")

    data_root = root / "data"
    run(["forge", "--config", str(cfg_path), "--root", str(data_root)])

    ckpt = root / "model.ckpt"
    run(["train", "--config", str(cfg_path), "--data", str(data_root),
         "--out", str(ckpt), "--steps", str(args.steps),
         "--loss-csv", str(root / "loss.csv")])

    manifest = json.loads((data_root / "manifest.json").read_text())
    item = manifest["items"][0]
    print(f"editing item {item['id']!r}: {item['instruction']!r}")
    run(["edit", "--config", str(cfg_path), "--checkpoint", str(ckpt),
         "--source", str(data_root / item["source_path"]),
         "--instruction", item["instruction"],
         "--out", str(root / "edited.wav")])

    run(["sample", "--config", str(cfg_path), "--checkpoint", str(ckpt),
         "--out", str(root / "generated.wav"),
         "--instruction", "add a sine tone to the recording.",
         "--seconds", "0.5"])

    run(["eval", "--config", str(cfg_path), "--manifest", str(data_root),
         "--out", str(root / "eval.json")])

    print(f"artifacts under {root}/: data/, model.ckpt, loss.csv, "
          f"edited.wav, generated.wav, eval.json")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
