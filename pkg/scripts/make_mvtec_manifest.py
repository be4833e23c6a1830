"""Write an evaluation manifest for an MVTecAD-style test split.

    python scripts/make_mvtec_manifest.py /data/mvtec_ad > mvtec_test.tsv

Expects ``<root>/<class>/test/<defect>/<name>.png`` with masks at
``<root>/<class>/ground_truth/<defect>/<name>_mask.png``; the ``good``
defect folder is the normal class.
"""

import sys
from pathlib import Path


def rows(root: Path):
    for cls_dir in sorted(p for p in root.iterdir() if (p / "test").is_dir()):
        for defect_dir in sorted(p for p in (cls_dir / "test").iterdir() if p.is_dir()):
            for image in sorted(defect_dir.glob("*.png")):
                if defect_dir.name == "good":
                    yield f"{image}\t-\t{cls_dir.name}\t0"
                else:
                    mask = cls_dir / "ground_truth" / defect_dir.name / f"{image.stem}_mask.png"
                    yield f"{image}\t{mask}\t{cls_dir.name}\t1"


if __name__ == "__main__":
    for line in rows(Path(sys.argv[1])):
        print(line)
