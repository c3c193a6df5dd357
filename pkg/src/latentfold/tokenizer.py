"""Byte-level tokenizer: token id = byte value."""

BYTE_VOCAB = 256


class DecodeError(ValueError):
    pass


def tokenize(text) -> list[int]:
    if isinstance(text, str):
        text = text.encode("utf-8")
    return list(bytes(text))


def detokenize(ids) -> bytes:
    ids = [int(i) for i in ids]
    bad = [i for i in ids if not 0 <= i < BYTE_VOCAB]
    if bad:
        raise DecodeError(f"token id {bad[0]} is not a byte")
    return bytes(ids)
