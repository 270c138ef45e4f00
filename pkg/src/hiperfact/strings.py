"""Shared dictionary mapping strings to dense integer handles."""

from __future__ import annotations


class StringDictionary:
    """Bidirectional string/handle table.

    Handles are dense unsigned integers handed out in first-intern order,
    starting at 0.  All engine components that need to compare identifiers,
    attribute names, or string payloads do so on handles; the dictionary is
    the only place where the original text is kept.
    """

    __slots__ = ("_handles", "_strings")

    def __init__(self) -> None:
        self._handles: dict[str, int] = {}
        self._strings: list[str] = []

    def intern(self, text: str) -> int:
        """Return the handle for ``text``, creating one if necessary."""
        handle = self._handles.get(text)
        if handle is None:
            handle = len(self._strings)
            self._handles[text] = handle
            self._strings.append(text)
        return handle

    def resolve(self, handle: int) -> str:
        """Return the string behind ``handle``; unknown handles are an error."""
        if isinstance(handle, int) and 0 <= handle < len(self._strings):
            return self._strings[handle]
        raise KeyError(f"unknown string handle {handle!r}")

    def get(self, text: str) -> int | None:
        """Handle for ``text`` if already interned, else None.  Never interns."""
        return self._handles.get(text)

    def __contains__(self, text: str) -> bool:
        return text in self._handles

    def __len__(self) -> int:
        # Doubles as the high watermark: handles are dense, so len() is
        # one past the largest handle ever issued.
        return len(self._strings)
