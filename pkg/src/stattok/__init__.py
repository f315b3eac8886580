"""stattok: an adaptive 1D discrete image tokenizer with learned soft
tail-dropping, plus a small length-adaptive autoregressive generator.

Submodules are imported explicitly (``from stattok import model`` etc.);
this package initializer stays import-light so the CLI can configure
thread limits before numpy loads.
"""

__version__ = "0.1.0"
