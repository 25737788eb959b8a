"""Covert SCSI mass-storage channel testbed.

The heavy lifting lives in the C++ core; this package re-exports it and
adds a few conveniences for scripting an analyst session.
"""

from ._core import (
    BLOCK_SIZE,
    MAX_PAYLOAD,
    ApiServer,
    Cdb,
    CdbKind,
    Console,
    Datagram,
    DatagramType,
    DeviceServer,
    Emulator,
    Implant,
    MsdcatError,
    Transport,
    connect,
    crc32,
    encode_datagram,
    is_covert,
    mark_covert,
    metrics,
    pack_blocks,
    parse_cdb,
    serialize_cdb,
    unpack_datagrams,
)

__all__ = [
    "BLOCK_SIZE",
    "MAX_PAYLOAD",
    "ApiServer",
    "Cdb",
    "CdbKind",
    "Console",
    "Datagram",
    "DatagramType",
    "DeviceServer",
    "Emulator",
    "Implant",
    "MsdcatError",
    "Transport",
    "connect",
    "crc32",
    "encode_datagram",
    "is_covert",
    "mark_covert",
    "metrics",
    "pack_blocks",
    "parse_cdb",
    "run_command",
    "serialize_cdb",
    "unpack_datagrams",
]


def run_command(console, session_id, line, until=None, timeout_ms=10000.0):
    """Sends one line and collects output until `until(text)` is true or the
    session closes. Returns the text gathered from the current end of output."""
    import time

    offset = console.session(session_id).output_offset
    console.exec(session_id, line)
    text = ""
    deadline = time.monotonic() + timeout_ms / 1000.0
    while time.monotonic() < deadline:
        console.wait_output(session_id, offset, 100.0)
        chunk = console.read_output(session_id, offset)
        text += chunk.text
        offset = chunk.next_offset
        if until is not None and until(text):
            break
        if not chunk.data and console.session(session_id).state == "closed":
            break
    return text
