"""Exception hierarchy.

The CLI maps each family onto an exit code: usage/config problems exit 1,
bad or missing data exits 2, numeric blow-ups exit 3.
"""

from __future__ import annotations


class SemadcError(Exception):
    exit_code = 1


class ConfigError(SemadcError, ValueError):
    exit_code = 1


class DataError(SemadcError, ValueError):
    exit_code = 2


class ManifestError(DataError):
    pass


class CropError(DataError):
    pass


class StoreFormatError(DataError):
    pass


class BadMagicError(StoreFormatError):
    pass


class TruncatedFileError(StoreFormatError):
    pass


class ChecksumError(StoreFormatError):
    pass


class BackendError(DataError):
    pass


class NumericError(SemadcError, ArithmeticError):
    exit_code = 3
