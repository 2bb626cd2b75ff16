"""ran-kit: radical analysis network for compositional glyph captioning.

Composite glyphs are described by captions built from radical tokens and
ten spatial structure operators. A convolutional encoder turns the glyph
into a grid of annotation vectors; a two-layer GRU decoder with coverage
attention emits the caption token by token. Characters whose caption never
occurred in training remain recognizable as long as their radicals and
structures did.
"""

__version__ = "0.1.0"
