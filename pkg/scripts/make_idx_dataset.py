import argparse
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from data import save_idx, synthetic_gaussians  # noqa: E402


def make_idx_dataset(output_folder: Path, num_classes: int, per_class: int, test_per_class: int,
                     image_size: int, seed: int):
    """Write train/test IDX pairs of synthetic class blobs into `output_folder`."""
    output_folder.mkdir(parents=True, exist_ok=True)
    for split, count in (("train", per_class), ("t10k", test_per_class)):
        dataset = synthetic_gaussians(num_classes, count, image_size, seed=[seed, 0 if split == "train" else 1],
                                      split="train" if split == "train" else "test")
        images = output_folder / f"{split}-images-idx3-ubyte"
        labels = output_folder / f"{split}-labels-idx1-ubyte"
        save_idx(dataset, images, labels)
        print(f"✅ {split}: {len(dataset)} images of {image_size}x{image_size} -> {images.name}, {labels.name}")


def main():
    parser = argparse.ArgumentParser(description="Write a synthetic dataset as IDX files")
    parser.add_argument("output_folder", help="Folder for the four IDX files")
    parser.add_argument("--classes", type=int, default=10)
    parser.add_argument("--per-class", type=int, default=200)
    parser.add_argument("--test-per-class", type=int, default=50)
    parser.add_argument("--size", type=int, default=28)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()
    make_idx_dataset(Path(args.output_folder), args.classes, args.per_class, args.test_per_class,
                     args.size, args.seed)


if __name__ == "__main__":
    main()
