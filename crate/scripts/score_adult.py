"""Score the UCI Adult test split with a model fitted on the training split.

Writes entity_id,outcome,group,score where outcome is income >50K, group is
race and score is the held-out predicted probability of outcome.

usage: score_adult.py SOURCE [OUTPUT]

SOURCE is a directory holding adult.data and adult.test, or any zip archive
(such as the `responsibly` wheel) that contains them.
"""

import io
import sys
import zipfile
from pathlib import Path

import pandas as pd
from sklearn.compose import ColumnTransformer
from sklearn.linear_model import LogisticRegression
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import OneHotEncoder, StandardScaler

COLUMNS = [
    "age", "workclass", "fnlwgt", "education", "education_num", "marital_status",
    "occupation", "relationship", "race", "sex", "capital_gain", "capital_loss",
    "hours_per_week", "native_country", "income",
]
NUMERIC = ["age", "education_num", "capital_gain", "capital_loss", "hours_per_week"]
CATEGORICAL = ["workclass", "marital_status", "occupation", "relationship", "sex", "native_country"]


def read_split(source: Path, name: str) -> pd.DataFrame:
    if source.is_dir():
        text = (source / name).read_text()
    else:
        with zipfile.ZipFile(source) as z:
            member = next(n for n in z.namelist() if n.endswith("/" + name) or n == name)
            text = z.read(member).decode()
    # The test split starts with a comment line and ends labels with a period.
    df = pd.read_csv(io.StringIO(text), names=COLUMNS, skipinitialspace=True, comment="|", na_values="?")
    df = df.dropna(subset=["income"])
    df["outcome"] = df["income"].str.rstrip(".") == ">50K"
    return df


def main() -> None:
    source = Path(sys.argv[1])
    output = Path(sys.argv[2]) if len(sys.argv) > 2 else Path("data/adult_scored.csv")
    train = read_split(source, "adult.data")
    test = read_split(source, "adult.test").reset_index(drop=True)

    features = ColumnTransformer([
        ("num", StandardScaler(), NUMERIC),
        ("cat", OneHotEncoder(handle_unknown="ignore"), CATEGORICAL),
    ])
    model = make_pipeline(features, LogisticRegression(max_iter=2000))
    model.fit(train[NUMERIC + CATEGORICAL].fillna("missing"), train["outcome"])
    score = model.predict_proba(test[NUMERIC + CATEGORICAL].fillna("missing"))[:, 1]

    out = pd.DataFrame({
        "entity_id": test.index.astype(str),
        "outcome": test["outcome"].map({True: "true", False: "false"}),
        "group": test["race"],
        "score": [f"{s:.6f}" for s in score],
    })
    output.parent.mkdir(parents=True, exist_ok=True)
    out.to_csv(output, index=False)
    print(f"{len(out)} rows, groups: {out['group'].value_counts().to_dict()}")


if __name__ == "__main__":
    main()
