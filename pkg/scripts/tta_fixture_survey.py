"""TFA vs TTA pixel AUROC and paired loss change over fixture seeds.

    python scripts/tta_fixture_survey.py [--weight-seeds 6] [--image-seeds 5]

Backs the choice of the CI fixture: prints one line per weight seed.
"""

import argparse

from zsal.fixtures import ci_fixture
from zsal.image_io import preprocess_array
from zsal.metrics import auroc
from zsal.pipeline import localize_rgb
from zsal.tta import TtaConfig, run_tta
from zsal.vision import encode_image


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--weight-seeds", type=int, default=6)
    ap.add_argument("--image-seeds", type=int, default=5)
    ap.add_argument("--mode", default="vv_multi")
    args = ap.parse_args()
    passing = total = 0
    for ws in range(args.weight_seeds):
        cells = []
        for im in range(args.image_seeds):
            f = ci_fixture(weight_seed=ws, image_seed=im, mode=args.mode)
            tfa = auroc(localize_rgb(f.rgb, f.store, f.config, f.pair, mode=f.mode).anomaly_map.scores, f.mask)
            tta = auroc(
                localize_rgb(f.rgb, f.store, f.config, f.pair, mode=f.mode, tta=TtaConfig()).anomaly_map.scores,
                f.mask,
            )
            patches = encode_image(preprocess_array(f.rgb, f.config), f.store, f.config, f.mode).patches
            res = run_tta(patches, f.pair, TtaConfig())
            ok = tta >= tfa - 0.02 and res.final_loss < res.initial_loss
            passing += ok
            total += 1
            cells.append(f"{tfa:.3f}->{tta:.3f}{'' if ok else '*'}")
        print(f"weights {ws}: " + "  ".join(cells))
    print(f"{passing}/{total} pass (* marks a failure)")


if __name__ == "__main__":
    main()
