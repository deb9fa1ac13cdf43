import json
import sys
from pathlib import Path

import pandas as pd


def metrics_to_frame(metrics_path):
    """Flatten a metrics.jsonl file into one row per epoch, one column per head accuracy."""
    with open(metrics_path) as f:
        records = [json.loads(line) for line in f if line.strip()]
    df = pd.json_normalize(records, sep="_")
    if "eval_head_accuracies" in df.columns:
        heads = df.pop("eval_head_accuracies").dropna()
        expanded = pd.DataFrame(heads.tolist(), index=heads.index)
        expanded.columns = [f"eval_fc{i + 1}_accuracy" for i in expanded.columns]
        df = df.join(expanded)
    return df


def metrics_to_csv(metrics_path, output_csv):
    df = metrics_to_frame(metrics_path)
    df.to_csv(output_csv, index=False)
    print(f"✅ {Path(metrics_path).name} -> {output_csv} ({len(df)} rows)")


# === USAGE ===
if __name__ == "__main__":
    if len(sys.argv) != 3:
        print("Usage: python metrics_to_csv.py runs/desk/metrics.jsonl metrics.csv")
    else:
        metrics_to_csv(sys.argv[1], sys.argv[2])
