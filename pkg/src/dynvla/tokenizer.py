"""Character-level tokenizer for the toy captioning models.

The alphabet covers every corpus caption and every attack target string.
Encoding an out-of-alphabet character is an error rather than an UNK
substitution so that detokenize(tokenize(s)) == s holds exactly.
"""

from dataclasses import dataclass, field

from .errors import ValidationError

PAD_ID = 0
BOS_ID = 1
SEP_ID = 2
EOS_ID = 3
N_SPECIALS = 4

SPECIAL_NAMES = {PAD_ID: "<pad>", BOS_ID: "<bos>", SEP_ID: "<sep>", EOS_ID: "<eos>"}

DEFAULT_ALPHABET = "abcdefghijklmnopqrstuvwxyz0123456789 '.,!?-"


@dataclass(frozen=True)
class TokenSequence:
    """Token ids together with the string they came from."""

    ids: tuple[int, ...]
    text: str

    def __len__(self) -> int:
        return len(self.ids)


class CharTokenizer:
    """Bijective char <-> id mapping over a fixed alphabet plus 4 specials."""

    def __init__(self, alphabet: str = DEFAULT_ALPHABET):
        if len(set(alphabet)) != len(alphabet):
            raise ValidationError("alphabet contains duplicate characters")
        if len(alphabet) + N_SPECIALS > 64:
            raise ValidationError(
                f"alphabet too large: {len(alphabet)} chars + {N_SPECIALS} specials > 64"
            )
        self.alphabet = alphabet
        self._char_to_id = {c: i + N_SPECIALS for i, c in enumerate(alphabet)}
        self._id_to_char = {i + N_SPECIALS: c for i, c in enumerate(alphabet)}

    @property
    def vocab_size(self) -> int:
        return N_SPECIALS + len(self.alphabet)

    def encode(self, text: str) -> list[int]:
        try:
            return [self._char_to_id[c] for c in text]
        except KeyError as exc:
            raise ValidationError(
                f"character {exc.args[0]!r} is not in the tokenizer alphabet"
            ) from None

    def decode(self, ids) -> str:
        """Map ids back to text; special ids are dropped."""
        return "".join(self._id_to_char[i] for i in ids if i >= N_SPECIALS)

    def sequence(self, text: str) -> TokenSequence:
        return TokenSequence(ids=tuple(self.encode(text)), text=text)
