"""Bitstream format and framed streaming for code grids.

Layout: header = magic "BNC1", version u8, sample_rate u32 LE, stride count
u8 + one u8 per stride, quantizer layer count u8, codebook bits u8. Each
frame = frame index u32 LE + the layer indices bit-packed big-endian within
bytes, zero-padded to a byte boundary. Pose is never transmitted; it lives at
the receiver.
"""

from __future__ import annotations

import socket as socket_mod
import struct
from dataclasses import dataclass

import numpy as np

from .codec import CodeGrid, ModelConfig

MAGIC = b"BNC1"
VERSION = 1


class WireError(ValueError):
    def __init__(self, message: str, byte_offset: int):
        super().__init__(f"{message} (at byte {byte_offset})")
        self.byte_offset = byte_offset


class BadMagicError(WireError):
    pass


class TruncatedError(WireError):
    def __init__(self, message: str, byte_offset: int, frame_index: int | None = None):
        super().__init__(message, byte_offset)
        self.frame_index = frame_index


class CorruptFrameError(WireError):
    pass


@dataclass(frozen=True)
class BitstreamHeader:
    sample_rate: int
    strides: tuple[int, ...]
    rvq_layers: int
    codebook_bits: int

    def __post_init__(self):
        if not (1 <= self.codebook_bits <= 16):
            raise ValueError(f"codebook_bits {self.codebook_bits} outside [1, 16]")

    @classmethod
    def from_config(cls, cfg: ModelConfig) -> "BitstreamHeader":
        return cls(cfg.sample_rate, tuple(cfg.strides), cfg.rvq_layers, cfg.codebook_bits)

    @classmethod
    def from_fingerprint(cls, fp: tuple) -> "BitstreamHeader":
        sr, strides, layers, size = fp
        return cls(sr, tuple(strides), layers, int(size).bit_length() - 1)

    def fingerprint(self) -> tuple:
        return (self.sample_rate, tuple(self.strides), self.rvq_layers, 2 ** self.codebook_bits)

    @property
    def payload_bytes(self) -> int:
        return (self.rvq_layers * self.codebook_bits + 7) // 8

    @property
    def frame_bytes(self) -> int:
        return 4 + self.payload_bytes

    def to_bytes(self) -> bytes:
        out = [MAGIC, struct.pack("<BI", VERSION, self.sample_rate),
               struct.pack("<B", len(self.strides))]
        out.extend(struct.pack("<B", s) for s in self.strides)
        out.append(struct.pack("<BB", self.rvq_layers, self.codebook_bits))
        return b"".join(out)


def pack_payload(indices: np.ndarray, bits: int) -> bytes:
    """Bit-pack one frame's layer indices, big-endian within bytes."""
    acc = 0
    for idx in indices:
        idx = int(idx)
        if not 0 <= idx < (1 << bits):
            raise ValueError(f"index {idx} does not fit in {bits} bits")
        acc = (acc << bits) | idx
    total_bits = bits * len(indices)
    nbytes = (total_bits + 7) // 8
    acc <<= nbytes * 8 - total_bits
    return acc.to_bytes(nbytes, "big")


def unpack_payload(payload: bytes, layers: int, bits: int) -> np.ndarray:
    acc = int.from_bytes(payload, "big") >> (len(payload) * 8 - layers * bits)
    mask = (1 << bits) - 1
    return np.array([(acc >> (bits * (layers - 1 - n))) & mask for n in range(layers)],
                    dtype=np.int64)


def pack(grid: CodeGrid) -> bytes:
    """Serialize a code grid: header, then one frame per latent step."""
    header = BitstreamHeader.from_fingerprint(grid.fingerprint)
    chunks = [header.to_bytes()]
    for i in range(grid.frames):
        chunks.append(struct.pack("<I", i))
        chunks.append(pack_payload(grid.indices[i], header.codebook_bits))
    return b"".join(chunks)


class StreamParser:
    """Incremental bitstream decoder; feed bytes, collect decoded frames."""

    def __init__(self):
        self._buf = bytearray()
        self._offset = 0            # absolute offset of _buf[0] in the stream
        self.header: BitstreamHeader | None = None
        self.rows: list[np.ndarray] = []
        self.payload_bytes_seen = 0

    def feed(self, data: bytes) -> list[np.ndarray]:
        """Consume bytes; returns frames completed by this feed."""
        self._buf.extend(data)
        fresh = []
        if self.header is None and not self._try_header():
            return fresh
        fb = self.header.frame_bytes
        while len(self._buf) >= fb:
            (idx,) = struct.unpack_from("<I", self._buf, 0)
            expected = len(self.rows)
            if idx != expected:
                raise CorruptFrameError(f"frame index {idx}, expected {expected}",
                                        self._offset)
            payload = bytes(self._buf[4:fb])
            row = unpack_payload(payload, self.header.rvq_layers, self.header.codebook_bits)
            self.rows.append(row)
            fresh.append(row)
            self.payload_bytes_seen += self.header.payload_bytes
            del self._buf[:fb]
            self._offset += fb
        return fresh

    def _try_header(self) -> bool:
        buf = self._buf
        if len(buf) < 4:
            return False
        if bytes(buf[:4]) != MAGIC:
            raise BadMagicError(f"bad magic {bytes(buf[:4])!r}", 0)
        if len(buf) < 10:
            return False
        version, sr = struct.unpack_from("<BI", buf, 4)
        if version != VERSION:
            raise CorruptFrameError(f"unsupported version {version}", 4)
        n_strides = buf[9]
        need = 10 + n_strides + 2
        if len(buf) < need:
            return False
        strides = tuple(int(b) for b in buf[10:10 + n_strides])
        layers, bits = buf[10 + n_strides], buf[11 + n_strides]
        try:
            self.header = BitstreamHeader(sr, strides, layers, bits)
        except ValueError as e:
            raise CorruptFrameError(str(e), 10 + n_strides) from None
        del buf[:need]
        self._offset += need
        return True

    def finalize(self) -> CodeGrid:
        if self.header is None:
            raise TruncatedError("stream ended before a complete header", self._offset + len(self._buf))
        if self._buf:
            raise TruncatedError(f"stream ended mid-frame with {len(self._buf)} trailing bytes",
                                 self._offset, frame_index=len(self.rows))
        indices = (np.stack(self.rows) if self.rows
                   else np.zeros((0, self.header.rvq_layers), dtype=np.int64))
        return CodeGrid(indices, self.header.fingerprint())

    def partial_grid(self) -> CodeGrid:
        """Grid over the frames decoded so far (a valid prefix)."""
        if self.header is None:
            raise TruncatedError("no header decoded yet", 0)
        indices = (np.stack(self.rows) if self.rows
                   else np.zeros((0, self.header.rvq_layers), dtype=np.int64))
        return CodeGrid(indices, self.header.fingerprint())


def unpack(data: bytes) -> CodeGrid:
    parser = StreamParser()
    parser.feed(data)
    return parser.finalize()


def bitrate(cfg: ModelConfig) -> float:
    """Payload bits per second: sample_rate / frame_stride * layers * bits."""
    return cfg.sample_rate * cfg.rvq_layers * cfg.codebook_bits / cfg.frame_stride


# ----------------------------------------------------------------- channels

class LoopbackChannel:
    """In-memory ordered byte pipe; recv returns b"" when nothing is queued."""

    def __init__(self):
        self._queue = bytearray()
        self._closed = False

    def send(self, data: bytes) -> None:
        if self._closed:
            raise RuntimeError("send on closed channel")
        self._queue.extend(data)

    def recv(self, max_n: int = 65536) -> bytes:
        out = bytes(self._queue[:max_n])
        del self._queue[:max_n]
        return out

    def close(self) -> None:
        self._closed = True

    def drained(self) -> bool:
        return self._closed and not self._queue


class SocketChannel:
    """Reliable stream-socket transport."""

    def __init__(self, sock: socket_mod.socket):
        self._sock = sock
        self._eof = False

    def send(self, data: bytes) -> None:
        self._sock.sendall(data)

    def recv(self, max_n: int = 65536) -> bytes:
        if self._eof:
            return b""
        data = self._sock.recv(max_n)
        if data == b"":
            self._eof = True
        return data

    def close(self) -> None:
        try:
            self._sock.shutdown(socket_mod.SHUT_WR)
        except OSError:
            pass

    def drained(self) -> bool:
        return self._eof


def connect_channel(endpoint: str) -> SocketChannel:
    """endpoint: "tcp://host:port"."""
    if not endpoint.startswith("tcp://"):
        raise ValueError(f"unsupported endpoint {endpoint!r}")
    host, port = endpoint[6:].rsplit(":", 1)
    sock = socket_mod.create_connection((host, int(port)))
    return SocketChannel(sock)


class StreamSender:
    """Writes the header once, then frames incrementally."""

    def __init__(self, channel, header: BitstreamHeader):
        self.channel = channel
        self.header = header
        self._next_index = 0
        channel.send(header.to_bytes())

    def send_frame(self, indices: np.ndarray) -> None:
        payload = pack_payload(indices, self.header.codebook_bits)
        self.channel.send(struct.pack("<I", self._next_index) + payload)
        self._next_index += 1

    def close(self) -> None:
        self.channel.close()


@dataclass
class SessionStats:
    frames_received: int = 0
    payload_bytes: int = 0
    first_decode_frames: int | None = None


class StreamReceiver:
    """Pulls bytes off a channel and yields decodable frame prefixes."""

    def __init__(self, channel):
        self.channel = channel
        self.parser = StreamParser()
        self.stats = SessionStats()

    def poll(self) -> list[np.ndarray]:
        """Consume currently available bytes; returns newly completed frames."""
        fresh: list[np.ndarray] = []
        while True:
            data = self.channel.recv()
            if data:
                fresh.extend(self.parser.feed(data))
            else:
                break
        if fresh and self.stats.first_decode_frames is None:
            self.stats.first_decode_frames = len(fresh)
        self.stats.frames_received = len(self.parser.rows)
        self.stats.payload_bytes = self.parser.payload_bytes_seen
        return fresh

    def finished(self) -> bool:
        return self.channel.drained()

    def prefix(self) -> CodeGrid:
        return self.parser.partial_grid()

    def result(self) -> CodeGrid:
        return self.parser.finalize()


def stream_grid(grid: CodeGrid, send_channel, recv_channel=None) -> tuple[CodeGrid, SessionStats]:
    """Push a grid frame-by-frame through a channel and decode it back.

    With a loopback channel the receiver drains after every frame, exercising
    true incremental delivery.
    """
    recv_channel = recv_channel if recv_channel is not None else send_channel
    sender = StreamSender(send_channel, BitstreamHeader.from_fingerprint(grid.fingerprint))
    receiver = StreamReceiver(recv_channel)
    for i in range(grid.frames):
        sender.send_frame(grid.indices[i])
        receiver.poll()
    sender.close()
    receiver.poll()
    if not receiver.finished():
        raise TruncatedError("channel not drained after close", receiver.parser._offset)
    return receiver.result(), receiver.stats
