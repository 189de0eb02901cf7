"""modellab utilities."""
import os
import pathlib
import tempfile

# environment variable capping worker threads (data generation, ablations)
THREADS_ENV = "MODELLAB_THREADS"


def key_validator(key: str, choices: list[str]) -> list[str]:
    """Validate a config key against the words it may be made of.

    Config keys are case and separator insensitive e.g. ("baseLr",
    "base-lr", "BASE_LR") are all valid spellings of "base_lr". To get back
    to the canonical spelling we break the key into its constituent words:
    "baselr" -> ["base", "lr"].

    Functionally speaking this is a backtracking search over a tightly
    bounded "language" (the choices arg), longest words are tried first so
    "lr" never shadows "lr_overrides" style prefixes.

    :param str key: The key to validate
    :param list[str] choices: list of words to choose from
    :returns: list containing the components of the key, if valid
        else an empty list
    :rtype: list[str]
    """
    # memoize results to speed up the backtracking process
    memo: dict[str, bool] = {}
    lang: list[str] = sorted(choices, key=len, reverse=True)
    # list holding matching results
    matches: list[str] = []

    def backtrack(s: str) -> bool:
        """Break down s into its constituents.

        :param str s: string to look for
        :returns: True if s is made of words in the language
        :rtype: bool
        """
        if s in memo:
            return memo[s]

        if s == "":
            return True

        res: bool = False
        for word in lang:
            if s.startswith(word) and backtrack(s[len(word):]):
                matches.append(word)
                res = True
                break

        memo[s] = res
        return res

    normalised = key.lower().replace("_", "").replace("-", "")
    if not normalised or not backtrack(normalised):
        return []

    return matches[::-1]


def atomic_write(filepath: pathlib.Path, payload: bytes | str) -> None:
    """Write a file atomically.

    The payload goes to a temp file in the destination directory which is
    then renamed over the destination, readers never see half a file.

    Note: this is distructive, we always overwrite the destination.

    :param pathlib.Path filepath: the path to the destination file
    :param bytes | str payload: the file contents
    """
    filepath = pathlib.Path(filepath)
    data = payload.encode("utf-8") if isinstance(payload, str) else payload

    fd, tmp = tempfile.mkstemp(
        prefix=f".{filepath.name}.", dir=filepath.parent or ".")
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(data)
        os.replace(tmp, filepath)
    except BaseException:
        pathlib.Path(tmp).unlink(missing_ok=True)
        raise


def atomic_append(filepath: pathlib.Path, lines: list[str]) -> None:
    """Append lines to a file, atomically.

    The existing contents plus the new lines are written to a temp file which
    replaces the original.

    :param pathlib.Path filepath: the file to append to
    :param list[str] lines: lines to append, without newlines
    """
    filepath = pathlib.Path(filepath)
    existing = filepath.read_bytes() if filepath.exists() else b""
    added = "".join(f"{line}\n" for line in lines).encode("utf-8")
    atomic_write(filepath, existing + added)


def worker_threads() -> int:
    """Number of worker threads allowed by the environment.

    :returns: the thread cap, 1 when unset
    :rtype: int
    :raises ValueError: if the variable is not a positive integer
    """
    raw = os.environ.get(THREADS_ENV, "").strip()
    if not raw:
        return 1

    if not raw.isdigit() or int(raw) < 1:
        raise ValueError(
            f"{THREADS_ENV} must be a positive integer, got: {raw!r}")

    return int(raw)
