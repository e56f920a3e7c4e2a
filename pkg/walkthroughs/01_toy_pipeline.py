"""Run every stage on the bundled toy world and look at what came out.

    python3 walkthroughs/01_toy_pipeline.py [workdir]
"""
import json
import sys
import tempfile
from pathlib import Path

import pandas as pd

from fertgrid import geo, pipeline
from fertgrid.toy import ToyWorld

root = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="fertgrid-"))
config = ToyWorld(seed=0).write(root)
print("fixture:", config)

cfg = pipeline.load_config(config)
pipeline.run_pipeline(cfg)
out = root / "out"

print("\ncross-validated performance")
print((out / "train" / "metrics.tsv").read_text())

print("top drivers of the N rate")
print(pd.read_csv(out / "explain" / "ranking_N.tsv", sep="\t").head(5).to_string(index=False))

rates = pd.read_csv(out / "adjust" / "rates.csv")
print("\nreconciled rates, first rows")
print(rates.head().to_string(index=False))

# a map of nitrogen on wheat in the base year, summed by country block
wheat = geo.read_raster(out / "downscale" / "WheatN2000.tiff")
print(f"\nWheatN2000: {wheat.values.sum() / 1e3:.1f} t over {wheat.spec.shape} cells")

manifest = json.loads((out / "downscale" / "manifest.json").read_text())["layers"]
print(f"{len(manifest)} rasters checksummed in the manifest")
print((out / "validate" / "validation.tsv").read_text())
