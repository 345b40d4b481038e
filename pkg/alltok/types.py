from typing import Literal

DType = Literal["f32", "f64"]
Task = Literal["dep", "ins"]
TokenizerTask = Literal["depth", "mask"]
DecodeMode = Literal["hard", "soft"]
Schedule = Literal["exponential", "cosine", "step", "linear"]
InterpolationMode = Literal["nearest", "bilinear"]
Primitive = Literal["rectangle", "ellipse"]
RoundtripSuite = Literal["vq", "codec", "interp"]
VocabularyRange = Literal["special", "coord", "class", "mask", "depth"]
