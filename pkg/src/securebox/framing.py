"""Frame reader — buffers stream chunks and emits frames as they complete.

For byte streams where frames arrive as fragments:
    b"\\x00\\x00"  →  b"\\x00\\x00\\x00\\x5c\\x01..."  →  complete 96-byte frame

The reader buffers until the 4-byte length prefix is known, then until the
whole frame is present, and hands back complete frames in arrival order.

Usage:
    reader = FrameReader()
    for chunk in link:
        for frame in reader.feed(chunk):
            handle(decode_frame(frame))
    reader.flush()          # raises MalformedFrame on a truncated tail

Frames completed before a corrupt length prefix are still handed back; the
error is raised on the next feed or flush.
"""

from __future__ import annotations

from .errors import MalformedFrame
from .wire import frame_length


class FrameReader:
    """Reassembles length-prefixed frames from arbitrary chunks."""

    __slots__ = ("_buffer", "_error")

    def __init__(self) -> None:
        self._buffer = bytearray()
        self._error: MalformedFrame | None = None

    def feed(self, chunk: bytes) -> list[bytes]:
        """Feed a chunk, return every frame it completes."""
        self._raise_pending()
        self._buffer += chunk
        return self._drain()

    def flush(self) -> None:
        """Call at end of stream; leftover bytes mean a truncated frame."""
        self._raise_pending()
        if self._buffer:
            leftover = len(self._buffer)
            self._buffer.clear()
            raise MalformedFrame(f"stream ended inside a frame ({leftover} bytes buffered)")

    @property
    def buffered(self) -> int:
        return len(self._buffer)

    def _raise_pending(self) -> None:
        if self._error is not None:
            error, self._error = self._error, None
            raise error

    def _drain(self) -> list[bytes]:
        frames: list[bytes] = []
        while len(self._buffer) >= 4:
            try:
                size = frame_length(bytes(self._buffer[:4]))
            except MalformedFrame as e:
                # The stream cannot resynchronise after a bad length.
                self._buffer.clear()
                if not frames:
                    raise
                self._error = e
                break
            if len(self._buffer) < size:
                break
            frames.append(bytes(self._buffer[:size]))
            del self._buffer[:size]
        return frames
