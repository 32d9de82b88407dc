from daquant.quant.bits import BitReader, BitString
from daquant.quant.combinatorics import (
    CorruptMessageError,
    MembershipError,
    SetSizeTable,
    rank,
    set_size,
    table_for,
    unrank,
)
from daquant.quant.dataq import (
    BoundViolationError,
    EncodedSample,
    LevelPair,
    QuantConfig,
    ScaleMode,
    bits_bound,
    dataq_decode,
    dataq_encode,
    dataq_stochastic,
    split_signed,
)
from daquant.quant.scalar import (
    poly_example_decode,
    poly_example_encode,
    scalar_1bit_decode,
    scalar_1bit_encode,
)

__all__ = [
    "BitReader", "BitString", "BoundViolationError", "CorruptMessageError",
    "EncodedSample", "LevelPair", "MembershipError", "QuantConfig", "ScaleMode",
    "SetSizeTable", "bits_bound", "dataq_decode", "dataq_encode", "dataq_stochastic",
    "poly_example_decode", "poly_example_encode", "rank", "scalar_1bit_decode",
    "scalar_1bit_encode", "set_size", "split_signed", "table_for", "unrank",
]
