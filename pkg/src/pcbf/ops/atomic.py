"""Crash-safe file replacement: write tmp, fsync, rename, fsync directory."""

from __future__ import annotations

import os
import secrets
from contextlib import contextmanager
from pathlib import Path
from typing import BinaryIO, Callable, Iterator

from ..errors import IoFailure

# Protocol boundaries passed to ``fault_hook``, in order.
BEFORE_TMP_WRITE = "before_tmp_write"
AFTER_TMP_WRITE = "after_tmp_write"
AFTER_FSYNC = "after_fsync"
AFTER_RENAME = "after_rename"
BOUNDARIES = (BEFORE_TMP_WRITE, AFTER_TMP_WRITE, AFTER_FSYNC, AFTER_RENAME)

FaultHook = Callable[[str], None]


def _fsync_dir(directory: Path) -> None:
    try:
        fd = os.open(directory, os.O_RDONLY)
    except OSError:
        return
    try:
        os.fsync(fd)
    except OSError:
        pass
    finally:
        os.close(fd)


def _tmp_path(path: Path) -> Path:
    # unique per writer so concurrent writes to one target never share a tmp file
    return path.with_name(f"{path.name}.{os.getpid()}.{secrets.token_hex(4)}.tmp")


@contextmanager
def atomic_writer(path: str | os.PathLike, fault_hook: FaultHook | None = None) -> Iterator[BinaryIO]:
    """Yield a binary handle whose contents replace ``path`` atomically on exit.

    ``fault_hook`` is called at each protocol boundary; an exception raised from
    it models a crash and leaves any tmp file behind, exactly as a dead process
    would. Errors from the body or the filesystem remove the tmp file; OS errors
    surface as ``IoFailure``.
    """
    path = Path(path)
    hook = fault_hook or (lambda _stage: None)
    if not path.parent.is_dir():
        raise IoFailure(f"directory does not exist: {path.parent}")
    tmp = _tmp_path(path)
    hook(BEFORE_TMP_WRITE)
    try:
        fh = open(tmp, "wb")
    except OSError as exc:
        raise IoFailure(f"cannot create {tmp}: {exc}") from exc

    def abort(exc: BaseException) -> None:
        fh.close()
        try:
            tmp.unlink()
        except OSError:
            pass
        if isinstance(exc, OSError) and not isinstance(exc, IoFailure):
            raise IoFailure(f"atomic write to {path} failed: {exc}") from exc
        raise exc

    try:
        yield fh
        fh.flush()
    except BaseException as exc:
        abort(exc)
    try:
        hook(AFTER_TMP_WRITE)
    except BaseException:
        fh.close()
        raise
    try:
        os.fsync(fh.fileno())
        fh.close()
    except OSError as exc:
        abort(exc)
    hook(AFTER_FSYNC)
    try:
        os.replace(tmp, path)
    except OSError as exc:
        abort(exc)
    hook(AFTER_RENAME)
    _fsync_dir(path.parent)


def atomic_write(path: str | os.PathLike, data: bytes, fault_hook: FaultHook | None = None) -> None:
    with atomic_writer(path, fault_hook) as fh:
        fh.write(data)
