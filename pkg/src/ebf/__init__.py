"""EBF: bounded symbolic packet exploration feeding an encryption-aware fuzzer."""

__version__ = "0.1.0"
