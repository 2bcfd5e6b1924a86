#!/usr/bin/env python3
"""Fetch the public medical benchmark tables and write them as CSV under data/.

Sources are PyPI packages that bundle the UCI tables:
  pydataset  -> MASS::biopsy (Wisconsin Breast Cancer, 699 x 9, "?" for missing)
  keel-ds    -> KEEL pima (Pima Indians Diabetes, 768 x 8) and heart (Statlog, 270 x 13)

Hepatitis (155 x 19) is not bundled by any package reachable from PyPI; place a
CSV with a "class" column at data/hepatitis.csv to include it.
"""
import csv
import glob
import io
import os
import subprocess
import sys
import tarfile
import tempfile
import zipfile

HERE = os.path.dirname(os.path.abspath(__file__))
OUT = os.path.join(HERE, "..", "data")

WBC_COLUMNS = [
    "clump_thickness", "cell_size_uniformity", "cell_shape_uniformity",
    "marginal_adhesion", "single_epithelial_cell_size", "bare_nuclei",
    "bland_chromatin", "normal_nucleoli", "mitoses",
]
PIMA_COLUMNS = ["preg", "plas", "pres", "skin", "insu", "mass", "pedi", "age"]
HEART_COLUMNS = [
    "age", "sex", "chest_pain", "rest_bp", "cholesterol", "fasting_sugar",
    "rest_ecg", "max_heart_rate", "exercise_angina", "oldpeak", "slope",
    "major_vessels", "thal",
]


def download(pkg, dest):
    subprocess.check_call([sys.executable, "-m", "pip", "download", pkg,
                           "--no-deps", "-q", "-d", dest])
    return glob.glob(os.path.join(dest, "*"))[0]


def write(name, header, rows):
    path = os.path.join(OUT, name)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    print(f"wrote {path}: {len(rows)} rows")


def wbc(tmp):
    sdist = download("pydataset==0.2.0", tmp)
    with tarfile.open(sdist) as outer:
        inner = outer.extractfile("pydataset-0.2.0/pydataset/resources.tar.gz")
        with tarfile.open(fileobj=io.BytesIO(inner.read())) as res:
            text = res.extractfile("resources/rdata/csv/MASS/biopsy.csv").read().decode()
    rows = []
    for rec in list(csv.reader(io.StringIO(text)))[1:]:
        feats = ["?" if v == "NA" else v for v in rec[2:11]]
        rows.append(feats + [rec[11]])
    write("wbc.csv", WBC_COLUMNS + ["class"], rows)


def keel(tmp):
    wheel = download("keel-ds==0.2.5", tmp)
    z = zipfile.ZipFile(wheel)

    def body(name):
        text = z.read(f"keel_ds/data/balanced/raw/{name}.dat").decode()
        return [l.strip() for l in text.splitlines() if l.strip() and not l.startswith("@")]

    pima = [[c.strip() for c in l.split(",")] for l in body("pima")]
    write("pima.csv", PIMA_COLUMNS + ["class"], pima)
    heart = []
    for l in body("heart"):
        cells = [c.strip() for c in l.split(",")]
        heart.append(cells[:-1] + ["present" if cells[-1] == "2" else "absent"])
    write("heart_statlog.csv", HEART_COLUMNS + ["class"], heart)


def main():
    os.makedirs(OUT, exist_ok=True)
    with tempfile.TemporaryDirectory() as a, tempfile.TemporaryDirectory() as b:
        wbc(a)
        keel(b)


if __name__ == "__main__":
    main()
