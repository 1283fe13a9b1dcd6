"""Regenerate src/widefeat/data/wavelets.json from PyWavelets.

Only needed when the library changes; the package itself never imports pywt.
"""
import json
from pathlib import Path

import pywt

LIBRARY = ["haar", "db2", "db4", "db8", "sym4", "sym8", "coif3"]
OUT = Path(__file__).resolve().parents[1] / "src" / "widefeat" / "data" / "wavelets.json"


def main():
    wavelets = {}
    for name in LIBRARY:
        w = pywt.Wavelet(name)
        wavelets[name] = {
            "family": w.family_name,
            "dec_lo": [float(f"{c:.17g}") for c in w.dec_lo],
            "dec_hi": [float(f"{c:.17g}") for c in w.dec_hi],
            "rec_lo": [float(f"{c:.17g}") for c in w.rec_lo],
            "rec_hi": [float(f"{c:.17g}") for c in w.rec_hi],
        }
    payload = {"version": 1, "source": f"PyWavelets {pywt.__version__}", "wavelets": wavelets}
    OUT.write_text(json.dumps(payload, indent=1) + "\n")
    print(f"wrote {OUT}")


if __name__ == "__main__":
    main()
