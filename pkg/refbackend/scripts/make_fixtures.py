"""Regenerate the cross-implementation fixtures under test/fixtures/.

Run from the refbackend directory with the engine package installed:
    python3 scripts/make_fixtures.py
Then re-record the golden transcript with scripts/record-golden.mjs.
"""

import json
import struct
from pathlib import Path

import numpy as np

from daugs.segmenters import _zscore_rows, curve_match_probs, write_prototypes_csv
from daugs.synth import PhantomSpec, gen_phantom, phantom_prototypes
from daugs.wire import pack_frame, pack_handshake

HERE = Path(__file__).resolve().parent.parent
FIX = HERE / "test" / "fixtures"

T, PATCH = 8, 6
TEMPERATURE = 0.2
OUTLIER_GAIN = 10.0


def main():
    FIX.mkdir(parents=True, exist_ok=True)
    rng = np.random.Generator(np.random.Philox(key=20260810))
    protos = np.stack(
        [
            0.05 + 0.02 * np.arange(T),
            0.1 + 0.4 * np.sin(np.arange(T) / 2.0) ** 2,
            np.where(np.arange(T) >= 2, 0.8, 0.1),
        ]
    )
    write_prototypes_csv(FIX / "prototypes.csv", protos)

    cases = []
    volumes = []
    for i in range(3):
        vol = rng.random((T, PATCH, PATCH)).astype(np.float32)
        if i == 1:  # one volume biased toward the bloodpool prototype
            vol = (protos[2][:, None, None] + 0.05 * rng.random((T, PATCH, PATCH))).astype(
                np.float32
            )
        q = _zscore_rows(protos)
        probs = curve_match_probs(vol, q, TEMPERATURE, OUTLIER_GAIN)
        cases.append(
            {
                "volume": [float(v) for v in vol.ravel()],
                "expected": [float(v) for v in probs.ravel()],
            }
        )
        volumes.append(vol)
    (FIX / "matcher_cases.json").write_text(
        json.dumps(
            {
                "t": T,
                "patch": PATCH,
                "temperature": TEMPERATURE,
                "outlier_gain": OUTLIER_GAIN,
                "prototypes": [[float(v) for v in row] for row in protos],
                "cases": cases,
            },
            indent=1,
        )
    )

    # engine-side bytes of a full session: handshake, two requests, shutdown
    transcript = pack_handshake(PATCH, T, 3)
    for req_id, vol in ((1, volumes[0]), (2, volumes[1])):
        transcript += pack_frame(req_id, np.ascontiguousarray(vol, "<f4").tobytes())
    transcript += pack_frame(0xFFFFFFFF, b"")
    (FIX / "golden_input.bin").write_bytes(transcript)
    print(f"wrote fixtures to {FIX}")


if __name__ == "__main__":
    main()
