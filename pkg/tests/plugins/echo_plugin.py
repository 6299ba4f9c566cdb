"""Loopback descriptor plugin: each vector is [mean, min, max] of the patch.

Deterministic and computable on the client side, so wire transport can be
checked bit for bit. --patch-size 32 advertises a 32 px input to exercise
the client's center-crop path.
"""

import argparse
import struct
import sys

import numpy as np

from plugin_server import DESCRIBE, INFO, TRAIN, fail_body, info_body, serve


def patch_stats(flat):
    arr = flat.astype(np.float64)
    return np.array([arr.mean(), arr.min(), arr.max()], dtype=np.float32)


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--patch-size", type=int, default=64)
    args = ap.parse_args()
    size = args.patch_size
    n_px = size * size

    def on_info(_payload):
        return info_body("echo-stats", 3, size)

    def on_train(_payload):
        path = b"echo-model"
        return b"\x00" + struct.pack("<I", len(path)) + path

    def on_describe(payload):
        (count,) = struct.unpack_from("<I", payload, 0)
        if len(payload) != 4 + count * n_px:
            return fail_body("bad DESCRIBE payload length")
        out = [b"\x00", struct.pack("<II", count, 3)]
        for i in range(count):
            flat = np.frombuffer(payload, dtype=np.uint8, count=n_px, offset=4 + i * n_px)
            out.append(patch_stats(flat).tobytes())
        return b"".join(out)

    serve({INFO: on_info, TRAIN: on_train, DESCRIBE: on_describe})


if __name__ == "__main__":
    sys.exit(main())
