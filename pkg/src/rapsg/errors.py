"""Exception hierarchy shared by the whole package.

Every error that can surface at the CLI boundary carries an ``exit_code``
so the command layer can translate failures uniformly:

    1  usage / configuration problems
    2  malformed or inconsistent input files
    3  summarizer backend failure after retries
"""

from __future__ import annotations


class RapsgError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigError(RapsgError):
    """Invalid configuration or command usage."""

    exit_code = 1


class InputFormatError(RapsgError):
    """An input file is malformed or inconsistent with its companions."""

    exit_code = 2


class StoreFormatError(InputFormatError):
    """A binary embedding-store file violates the on-disk format.

    ``offset`` is the byte position at which parsing failed.
    """

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class MalformedHeaderError(StoreFormatError):
    """Magic, version, flags, or fixed header fields are invalid."""


class DimensionMismatchError(StoreFormatError):
    """Declared dimension/count disagree with the actual data."""


class DuplicateIdError(StoreFormatError):
    """The id table contains a repeated identifier."""

    def __init__(self, dup_id: str, offset: int):
        super().__init__(f"duplicate id {dup_id!r}", offset)
        self.dup_id = dup_id


class InvalidIdError(StoreFormatError):
    """An id table entry is empty or not valid UTF-8."""


class TruncatedPayloadError(StoreFormatError):
    """The file ends before the declared id table or payload is complete."""


class ChecksumError(StoreFormatError):
    """The trailing CRC32 does not match the file contents."""


class BackendError(RapsgError):
    """The summarizer backend failed after the configured retries.

    ``request_id`` identifies the failing request in logs and messages.
    """

    exit_code = 3

    def __init__(self, message: str, request_id: str | None = None):
        self.request_id = request_id
        if request_id is not None:
            message = f"{message} [request {request_id}]"
        super().__init__(message)


class BackendProtocolError(BackendError):
    """The backend answered, but not with a valid protocol response."""


class ResumeError(InputFormatError):
    """A resume attempt was refused because digests or config changed."""
