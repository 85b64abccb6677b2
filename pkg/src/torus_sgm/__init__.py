"""Score-based generative modelling on the flat torus, with computable error certificates."""

__version__ = "0.1.0"
