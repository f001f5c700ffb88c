"""Build the committed fixture: composite glyph images with box
annotations plus a small trained CNN exported to the container format.

The composite test set is generated from the seed alone, so rebuilding
with the same seed reproduces the annotation bytes regardless of how
training goes. Training uses its own derived seed and must reach the
accuracy bar before anything is exported.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torch import nn

from .export import export_model
from .glyphs import CLASS_NAMES, NUM_CLASSES, draw_glyph


class FixtureError(RuntimeError):
    pass


@dataclass(frozen=True)
class FixtureSpec:
    seed: int = 0
    image_size: int = 64
    num_classes: int = NUM_CLASSES
    train_size: int = 3000
    val_size: int = 500
    test_composites: int = 200
    epochs: int = 8
    batch_size: int = 64
    learning_rate: float = 1e-3
    accuracy_bar: float = 0.90
    # raw-pixel preprocessing; 0.5/0.5 maps [0,1] pixels onto [-1,1]
    mean: float = 0.5
    std: float = 0.5

    def __post_init__(self):
        if self.image_size % 2 != 0:
            raise ValueError("image size must be even (left/right halves)")
        if self.num_classes < 2 or self.num_classes > NUM_CLASSES:
            raise ValueError(f"num_classes must be in [2, {NUM_CLASSES}]")


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    return rng.integers(0, 60, (size, size), dtype=np.uint8)


def _glyph_params(rng: np.random.Generator, lo: int, hi: int) -> tuple[int, int]:
    size = int(rng.integers(lo, hi + 1))
    intensity = int(rng.integers(170, 256))
    return size, intensity


def single_object_batch(spec: FixtureSpec, rng: np.random.Generator,
                        count: int) -> tuple[np.ndarray, np.ndarray]:
    """Training images: one glyph placed anywhere on a noisy background."""
    s = spec.image_size
    images = np.zeros((count, s, s), dtype=np.uint8)
    labels = np.zeros(count, dtype=np.int64)
    for i in range(count):
        label = int(rng.integers(spec.num_classes))
        canvas = _background(rng, s)
        size, intensity = _glyph_params(rng, 16, 30)
        row0 = int(rng.integers(1, s - size))
        col0 = int(rng.integers(1, s - size))
        draw_glyph(canvas, label, size, row0, col0, intensity)
        images[i] = canvas
        labels[i] = label
    return images, labels


def build_composites(spec: FixtureSpec, out_dir: str | Path) -> list[dict]:
    """Write the two-object test images and their annotation lines.

    Each image holds two glyphs of different classes, one per half, with
    disjoint tight boxes; every object becomes one annotation record.
    """
    out_dir = Path(out_dir)
    images_dir = out_dir / "images"
    images_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    s = spec.image_size
    half = s // 2
    max_size = half - 4
    records = []
    for i in range(spec.test_composites):
        left, right = rng.choice(spec.num_classes, size=2, replace=False)
        canvas = _background(rng, s)
        boxes = {}
        for label, (c_lo, c_hi) in ((int(left), (1, half - 1)),
                                    (int(right), (half + 1, s - 1))):
            size, intensity = _glyph_params(rng, 14, max_size)
            row0 = int(rng.integers(1, s - size))
            col0 = int(rng.integers(c_lo, c_hi - size + 1))
            boxes[label] = draw_glyph(canvas, label, size, row0, col0, intensity)
        name = f"composite_{i:03d}.png"
        rgb = np.repeat(canvas[:, :, None], 3, axis=2)
        Image.fromarray(rgb).save(images_dir / name)
        for label, box in boxes.items():
            records.append({"image": f"images/{name}", "label": label,
                            "boxes": [list(box)]})
    lines = [json.dumps(r, sort_keys=True) for r in records]
    (out_dir / "annotations.jsonl").write_text("\n".join(lines) + "\n")
    return records


def build_network(num_classes: int, image_size: int) -> nn.Sequential:
    reduced = image_size // 8  # three 2x2 poolings
    return nn.Sequential(
        nn.Conv2d(3, 8, 3, padding=1),
        nn.BatchNorm2d(8),
        nn.ReLU(),
        nn.MaxPool2d(2, 2),
        nn.Conv2d(8, 16, 3, padding=1),
        nn.BatchNorm2d(16),
        nn.ReLU(),
        nn.MaxPool2d(2, 2),
        nn.Conv2d(16, 32, 3, padding=1),
        nn.BatchNorm2d(32),
        nn.ReLU(),
        nn.MaxPool2d(2, 2),
        nn.Flatten(),
        nn.Linear(32 * reduced * reduced, 64),
        nn.ReLU(),
        nn.Linear(64, num_classes),
    )


def _to_tensor(spec: FixtureSpec, images: np.ndarray) -> torch.Tensor:
    x = images.astype(np.float32) / 255.0
    x = (x - spec.mean) / spec.std
    x = np.repeat(x[:, None, :, :], 3, axis=1)
    return torch.from_numpy(x)


def train_network(spec: FixtureSpec, log=print) -> tuple[nn.Sequential, float]:
    """Train on single-object images; returns (model, held-out accuracy)."""
    rng = np.random.default_rng(spec.seed + 1)
    torch.manual_seed(spec.seed)
    train_x, train_y = single_object_batch(spec, rng, spec.train_size)
    val_x, val_y = single_object_batch(spec, rng, spec.val_size)

    model = build_network(spec.num_classes, spec.image_size)
    optimizer = torch.optim.Adam(model.parameters(), lr=spec.learning_rate)
    loss_fn = nn.CrossEntropyLoss()
    xt = _to_tensor(spec, train_x)
    yt = torch.from_numpy(train_y)
    order_rng = np.random.default_rng(spec.seed + 2)
    for epoch in range(spec.epochs):
        model.train()
        order = order_rng.permutation(spec.train_size)
        total = 0.0
        for start in range(0, spec.train_size, spec.batch_size):
            idx = order[start:start + spec.batch_size]
            optimizer.zero_grad()
            loss = loss_fn(model(xt[idx]), yt[idx])
            loss.backward()
            optimizer.step()
            total += float(loss) * len(idx)
        accuracy = evaluate(spec, model, val_x, val_y)
        log(f"epoch {epoch + 1}/{spec.epochs}: "
            f"loss {total / spec.train_size:.4f}, val accuracy {accuracy:.4f}")
    return model, accuracy


def evaluate(spec: FixtureSpec, model: nn.Module, images: np.ndarray,
             labels: np.ndarray) -> float:
    model.eval()
    with torch.no_grad():
        pred = model(_to_tensor(spec, images)).argmax(dim=1).numpy()
    return float(np.mean(pred == labels))


def make_fixture(spec: FixtureSpec, out_dir: str | Path, log=print) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = build_composites(spec, out_dir)
    log(f"wrote {spec.test_composites} composite images, "
        f"{len(records)} annotations")

    model, accuracy = train_network(spec, log=log)
    if accuracy < spec.accuracy_bar:
        raise FixtureError(f"held-out accuracy {accuracy:.4f} below the "
                           f"{spec.accuracy_bar:.2f} bar; fixture not exported")

    c = 3
    result = export_model(
        model, out_dir,
        input_shape=(c, spec.image_size, spec.image_size),
        class_names=CLASS_NAMES[:spec.num_classes],
        mean=np.full(c, spec.mean, dtype=np.float32),
        std=np.full(c, spec.std, dtype=np.float32),
        seed=spec.seed)
    log(f"exported container to {result.model_dir} "
        f"(max round-trip logit error {result.max_logit_error:.3g})")

    metadata = {
        "seed": spec.seed,
        "image_size": spec.image_size,
        "class_names": list(CLASS_NAMES[:spec.num_classes]),
        "test_composites": spec.test_composites,
        "annotations": len(records),
        "train_size": spec.train_size,
        "val_size": spec.val_size,
        "val_accuracy": float(f"{accuracy:.9g}"),
        "round_trip_max_error": float(f"{result.max_logit_error:.9g}"),
    }
    (out_dir / "metadata.json").write_text(
        json.dumps(metadata, indent=2, sort_keys=True) + "\n")
    return metadata


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="clrp-make-fixture",
        description="generate the glyph fixture dataset and trained container")
    parser.add_argument("--out", default="fixtures")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--train-size", type=int, default=3000)
    parser.add_argument("--epochs", type=int, default=8)
    parser.add_argument("--composites", type=int, default=200)
    args = parser.parse_args(argv)
    spec = FixtureSpec(seed=args.seed, train_size=args.train_size,
                       epochs=args.epochs, test_composites=args.composites)
    try:
        metadata = make_fixture(spec, args.out)
    except FixtureError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(json.dumps(metadata, indent=2, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
