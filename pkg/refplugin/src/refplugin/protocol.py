"""Server side of the descriptor plugin wire protocol.

Little-endian frames on stdin/stdout: magic "PPDP", version u16 = 1,
command u16, payload_len u32, payload. The response frame echoes the
request command; its payload opens with a status byte, 0 for success,
1 for failure followed by a u32-length-prefixed UTF-8 message.
"""

import struct
import sys

MAGIC = b"PPDP"
VERSION = 1
CMD_INFO = 1
CMD_TRAIN = 2
CMD_DESCRIBE = 3

HEADER = struct.Struct("<4sHHI")

OK = b"\x00"


def fail_body(message: str) -> bytes:
    enc = message.encode("utf-8")
    return b"\x01" + struct.pack("<I", len(enc)) + enc


def read_exact(stream, n: int) -> bytes | None:
    """n bytes or None on end of stream; never a short read."""
    chunks = []
    remaining = n
    while remaining > 0:
        chunk = stream.read(remaining)
        if not chunk:
            return None
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def serve_loop(handlers, stdin=None, stdout=None) -> int:
    """Answer frames until end of stream.

    handlers maps command id to fn(payload) -> response body including
    the status byte. Handler exceptions become status-1 responses; the
    loop itself only stops on EOF or unrecoverable stream corruption
    (bad magic or version), where framing is lost and no addressed
    response is possible.
    """
    stdin = stdin if stdin is not None else sys.stdin.buffer
    stdout = stdout if stdout is not None else sys.stdout.buffer
    while True:
        head = read_exact(stdin, HEADER.size)
        if head is None:
            return 0
        magic, version, cmd, length = HEADER.unpack(head)
        if magic != MAGIC or version != VERSION:
            return 0
        payload = read_exact(stdin, length) if length else b""
        if payload is None:
            return 0
        handler = handlers.get(cmd)
        if handler is None:
            body = fail_body(f"unknown command {cmd}")
        else:
            try:
                body = handler(payload)
            except Exception as exc:  # noqa: BLE001  contract: never crash
                body = fail_body(f"{type(exc).__name__}: {exc}")
        stdout.write(HEADER.pack(MAGIC, VERSION, cmd, len(body)) + body)
        stdout.flush()
