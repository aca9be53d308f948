"""Fixed token vocabulary shared by captions, instructions and the text encoders."""

OBJECT_COLORS = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "cyan": (0.0, 1.0, 1.0),
    "magenta": (1.0, 0.0, 1.0),
    "orange": (1.0, 0.5, 0.0),
    "purple": (0.5, 0.0, 1.0),
}
BACKGROUND_COLORS = {
    "black": (0.0, 0.0, 0.0),
    "gray": (0.5, 0.5, 0.5),
    "white": (1.0, 1.0, 1.0),
}

TOKENS = (
    ["<pad>", "<unk>"]
    + list(OBJECT_COLORS)
    + list(BACKGROUND_COLORS)
    + ["pink", "brown"]
    + ["sphere", "box", "ball", "cube", "object", "objects", "scene"]
    + ["small", "large", "bigger", "smaller"]
    + ["a", "the", "and", "on", "with", "background", "one", "two", "three"]
    + ["make", "turn", "remove", "delete", "enlarge", "recolor", "into", "it"]
)
TOKEN_ID = {tok: i for i, tok in enumerate(TOKENS)}
PAD = TOKEN_ID["<pad>"]
UNK = TOKEN_ID["<unk>"]


def encode_tokens(words) -> list[int]:
    if isinstance(words, str):
        words = words.split()
    return [TOKEN_ID.get(w, UNK) for w in words]


def decode_tokens(ids) -> list[str]:
    return [TOKENS[i] for i in ids]
