"""Request handlers and entry point for the plugin process."""

import argparse
import struct
import sys
from pathlib import Path

import numpy as np

from . import protocol
from .container import ContainerError, resolve_train_containers
from .model import OUT_DIM, PluginModel, load_model, save_model, untrained_model
from .train import TrainingError, train_model

NAME = "ref-linear-triplet"
PATCH_SIZE = 64
MODEL_FILENAME = NAME + ".bin"


class PluginServer:
    def __init__(self, seed: int = 0, model: PluginModel | None = None):
        self.base_seed = seed
        self.model = model if model is not None else untrained_model(seed)

    # one method per command; each returns a full response body

    def handle_info(self, payload: bytes) -> bytes:
        enc = NAME.encode("utf-8")
        return (
            protocol.OK
            + struct.pack("<H", len(enc))
            + enc
            + struct.pack("<II", OUT_DIM, PATCH_SIZE)
        )

    def handle_train(self, payload: bytes) -> bytes:
        if len(payload) < 4:
            return protocol.fail_body("TRAIN payload shorter than its length prefix")
        (path_len,) = struct.unpack_from("<I", payload, 0)
        if len(payload) != 4 + path_len:
            return protocol.fail_body(
                f"TRAIN payload is {len(payload)} bytes, prefix says {4 + path_len}"
            )
        try:
            manifest_path = payload[4:].decode("utf-8")
        except UnicodeDecodeError:
            return protocol.fail_body("TRAIN path is not UTF-8")
        try:
            dirs, meta = resolve_train_containers(manifest_path)
        except ContainerError as exc:
            return protocol.fail_body(str(exc))
        seed = meta.get("seed", self.base_seed)
        if not isinstance(seed, int) or isinstance(seed, bool):
            return protocol.fail_body(f"manifest seed {seed!r} is not an integer")
        try:
            model = train_model(dirs, seed)
        except (TrainingError, ContainerError) as exc:
            return protocol.fail_body(str(exc))
        p = Path(manifest_path)
        out = (p if p.is_dir() else p.parent) / MODEL_FILENAME
        save_model(model, out)
        self.model = model
        enc = str(out).encode("utf-8")
        return protocol.OK + struct.pack("<I", len(enc)) + enc

    def handle_describe(self, payload: bytes) -> bytes:
        if len(payload) < 4:
            return protocol.fail_body("DESCRIBE payload shorter than its count")
        (count,) = struct.unpack_from("<I", payload, 0)
        need = 4 + count * PATCH_SIZE * PATCH_SIZE
        if len(payload) != need:
            return protocol.fail_body(
                f"DESCRIBE payload is {len(payload)} bytes, {count} patches need {need}"
            )
        head = protocol.OK + struct.pack("<II", count, OUT_DIM)
        if count == 0:
            return head
        patches = np.frombuffer(payload, dtype=np.uint8, offset=4).reshape(
            count, PATCH_SIZE, PATCH_SIZE
        )
        vectors = self.model.describe(patches)
        return head + vectors.astype("<f4").tobytes()

    def handlers(self) -> dict:
        return {
            protocol.CMD_INFO: self.handle_info,
            protocol.CMD_TRAIN: self.handle_train,
            protocol.CMD_DESCRIBE: self.handle_describe,
        }


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="refplugin",
        description="Trainable linear patch-descriptor plugin; speaks the "
        "descriptor wire protocol on stdin/stdout.",
    )
    parser.add_argument("--seed", type=int, default=0,
                        help="seed for the untrained projection and the TRAIN "
                        "fallback when the manifest carries no seed field")
    parser.add_argument("--model", type=Path, default=None,
                        help="load a saved model at startup instead of the "
                        "untrained projection")
    args = parser.parse_args(argv)

    model = None
    if args.model is not None:
        model = load_model(args.model)
    server = PluginServer(seed=args.seed, model=model)
    return protocol.serve_loop(server.handlers())


if __name__ == "__main__":
    sys.exit(main())
