"""Regenerates interp_oracle.bin from torch.nn.functional.interpolate.

Record layout (little-endian): u32 in_h, in_w, out_h, out_w, flags;
f32 input[in_h*in_w]; f32 expected[out_h*out_w]. Records repeat until EOF.
flags: bit 0 = antialias, bit 1 = nearest (legacy) instead of bilinear.

torch's antialiased kernel broadcasts row 0 over the whole output when the
width after its horizontal pass is 1, so those cases are rebuilt from two
one-dimensional passes with the vertical pass run on the transpose.
"""
import struct
import sys

import numpy as np
import torch
import torch.nn.functional as F

ANTIALIAS = 1
NEAREST = 2


def record(out, x, oh, ow, flags):
    t = torch.from_numpy(x)[None, None]
    if flags & NEAREST:
        y = F.interpolate(t, size=(oh, ow), mode="nearest")
    elif flags & ANTIALIAS and ow == 1:
        w = F.interpolate(t, size=(x.shape[0], 1), mode="bilinear", align_corners=False, antialias=True)
        y = F.interpolate(w.transpose(2, 3), size=(1, oh), mode="bilinear", align_corners=False,
                          antialias=True).transpose(2, 3)
    else:
        y = F.interpolate(t, size=(oh, ow), mode="bilinear", align_corners=False,
                          antialias=bool(flags & ANTIALIAS))
    y = y[0, 0].numpy().astype("<f4")
    ih, iw = x.shape
    out.write(struct.pack("<5I", ih, iw, oh, ow, flags))
    out.write(x.astype("<f4").tobytes())
    out.write(y.tobytes())


def main(path):
    rng = np.random.default_rng(20240521)
    fixed = [
        ((1, 2), (1, 4), 0),
        ((8, 8), (96, 96), 0),
        ((96, 96), (24, 24), ANTIALIAS),
        ((96, 96), (24, 24), 0),
        ((24, 24), (64, 64), ANTIALIAS),
        ((48, 64), (21, 28), ANTIALIAS),
        ((96, 96), (8, 8), NEAREST),
        ((4, 4), (2, 2), NEAREST),
        ((5, 7), (5, 7), ANTIALIAS),
        ((14, 29), (6, 1), ANTIALIAS),
    ]
    with open(path, "wb") as out:
        for (ih, iw), (oh, ow), flags in fixed:
            record(out, rng.random((ih, iw), dtype=np.float32), oh, ow, flags)
        for _ in range(150):
            ih, iw, oh, ow = (int(v) for v in rng.integers(1, 41, size=4))
            flags = int(rng.choice([0, ANTIALIAS, NEAREST]))
            x = rng.standard_normal((ih, iw)).astype(np.float32)
            record(out, x, oh, ow, flags)


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "interp_oracle.bin")
