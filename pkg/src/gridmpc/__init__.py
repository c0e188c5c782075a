"""Receding-horizon emergency voltage control with trajectory sensitivities
and neural-network surrogates for the online correction loop."""

__version__ = "0.1.0"
