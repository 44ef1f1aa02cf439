"""niab: benchmark harness and retrieve-then-rank decision engine for
non-intrusive robot assistance."""

__version__ = "0.1.0"

from .episodes import (  # noqa: F401
    NO_OP,
    SCENES,
    Corpus,
    Episode,
    OracleLabel,
    load_corpus,
    parse_corpus,
    save_corpus,
    serialize_corpus,
)
