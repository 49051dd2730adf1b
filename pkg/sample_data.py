"""Build the real-data fixture CSVs under tests/fixtures/.

diabetes.csv  442 patients, ten baseline variables (AGE, SEX, BMI, BP, S1-S6)
              on their original units and the progression measure Y; taken
              from the copy bundled with scikit-learn (load_diabetes, unscaled).
boston.csv    506 tracts of the corrected Boston housing data. Needs an export
              of the corrected table (columns cmedv, crim, zn, indus, chas, nox,
              rm, age, dis, rad, tax, ptratio, lstat; e.g. mlbench's
              BostonHousing2 written with write.csv) passed as --boston-source.
              Response lcmedv = log(cmedv); lnox, ldis, ltax, llstat are natural
              logs of nox, dis, tax, lstat; chas is renamed chast.

Run: python sample_data.py [--boston-source BostonHousing2.csv]
"""
import argparse
import logging
import os
from typing import Optional

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

FIXTURE_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "tests", "fixtures")

BOSTON_RESPONSE = "lcmedv"
BOSTON_COVARIATES = ["crim", "zn", "indus", "rm", "age", "rad", "ptratio",
                     "lnox", "ldis", "ltax", "llstat", "chast"]
DIABETES_RESPONSE = "Y"
DIABETES_COVARIATES = ["AGE", "SEX", "BMI", "BP", "S1", "S2", "S3", "S4", "S5", "S6"]


def diabetes_frame() -> pd.DataFrame:
    from sklearn.datasets import load_diabetes

    bunch = load_diabetes(scaled=False)
    frame = pd.DataFrame(bunch.data, columns=DIABETES_COVARIATES)
    frame[DIABETES_RESPONSE] = bunch.target
    return frame[[DIABETES_RESPONSE, *DIABETES_COVARIATES]]


def boston_frame(source: str) -> pd.DataFrame:
    raw = pd.read_csv(source)
    raw.columns = [c.strip().lower() for c in raw.columns]
    needed = ["cmedv", "crim", "zn", "indus", "chas", "nox", "rm", "age", "dis", "rad", "tax",
              "ptratio", "lstat"]
    missing = [c for c in needed if c not in raw.columns]
    if missing:
        raise ValueError(f"{source} lacks columns {missing}")
    frame = pd.DataFrame({
        BOSTON_RESPONSE: np.log(raw["cmedv"].astype(float)),
        "crim": raw["crim"].astype(float),
        "zn": raw["zn"].astype(float),
        "indus": raw["indus"].astype(float),
        "rm": raw["rm"].astype(float),
        "age": raw["age"].astype(float),
        "rad": raw["rad"].astype(float),
        "ptratio": raw["ptratio"].astype(float),
        "lnox": np.log(raw["nox"].astype(float)),
        "ldis": np.log(raw["dis"].astype(float)),
        "ltax": np.log(raw["tax"].astype(float)),
        "llstat": np.log(raw["lstat"].astype(float)),
        # factor exports write "0"/"1"
        "chast": pd.to_numeric(raw["chas"]).astype(float),
    })
    return frame[[BOSTON_RESPONSE, *BOSTON_COVARIATES]]


def seed(out_dir: str = FIXTURE_DIR, boston_source: Optional[str] = None):
    os.makedirs(out_dir, exist_ok=True)
    diabetes = diabetes_frame()
    diabetes.to_csv(os.path.join(out_dir, "diabetes.csv"), index=False)
    logger.info("wrote diabetes.csv (%d rows)", len(diabetes))
    if boston_source:
        boston = boston_frame(boston_source)
        boston.to_csv(os.path.join(out_dir, "boston.csv"), index=False)
        logger.info("wrote boston.csv (%d rows)", len(boston))
    else:
        logger.warning("no --boston-source given; boston.csv not built")


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--boston-source", default=None)
    parser.add_argument("--out-dir", default=FIXTURE_DIR)
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO)
    seed(args.out_dir, args.boston_source)
