#!/usr/bin/env python3
"""Convert the long-format PBC2 table (one row per visit, as shipped with the
R `JM` package and auton-survival) into lsurv CSV inputs.

Causes: 1 = death, 2 = transplant. Times are in years.
"""
import argparse
import csv
import math
import os

NUMERIC = ["age", "serBilir", "serChol", "albumin", "alkaline", "SGOT", "platelets", "prothrombin"]
LOGGED = {"serBilir", "alkaline", "SGOT"}
CATEGORICAL = {
    "drug": ["placebo", "D-penicil"],
    "sex": ["male", "female"],
    "ascites": ["No", "Yes"],
    "hepatomegaly": ["No", "Yes"],
    "spiders": ["No", "Yes"],
    "edema": ["No edema", "edema no diuretics", "edema despite diuretics"],
    "histologic": ["1", "2", "3", "4"],
}
STATUS = {"alive": 0, "dead": 1, "transplanted": 2}


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("source", help="pbc2.csv")
    ap.add_argument("out_dir")
    args = ap.parse_args()
    os.makedirs(args.out_dir, exist_ok=True)

    outcomes = {}
    obs = []
    with open(args.source, newline="") as f:
        for row in csv.DictReader(f):
            sid = "p" + row["id"]
            outcomes[sid] = (float(row["years"]), STATUS[row["status"]])
            t = float(row["year"])
            for name in NUMERIC:
                v = row[name]
                if v in ("", "NA"):
                    continue
                x = float(v)
                if name in LOGGED:
                    x = math.log(x)
                obs.append((sid, t, name, repr(x)))
            for name, levels in CATEGORICAL.items():
                v = row[name]
                if v in ("", "NA"):
                    continue
                obs.append((sid, t, name, str(levels.index(v))))

    with open(os.path.join(args.out_dir, "schema.txt"), "w") as f:
        for name in NUMERIC:
            f.write(f"{name},numeric\n")
        for name, levels in CATEGORICAL.items():
            f.write(f"{name},categorical,{len(levels)}\n")
    with open(os.path.join(args.out_dir, "observations.csv"), "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["subject_id", "time", "feature", "value"])
        w.writerows(obs)
    with open(os.path.join(args.out_dir, "outcomes.csv"), "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["subject_id", "event_time", "event_cause"])
        for sid, (t, e) in outcomes.items():
            w.writerow([sid, repr(t), e])
    print(f"{len(outcomes)} subjects, {len(obs)} observations")


if __name__ == "__main__":
    main()
