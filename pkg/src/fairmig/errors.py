class FairMigError(Exception):
    """Base class for all framework errors."""


class SchemaError(FairMigError):
    pass


class ValidationError(FairMigError):
    pass


class ConfigError(FairMigError):
    pass


class ContractError(FairMigError):
    pass


class MigrationDegeneracyError(FairMigError):
    pass


class MetricUndefinedError(FairMigError):
    pass


class ComparisonError(FairMigError):
    pass


class NumericError(FairMigError):
    """Non-finite value encountered. ``where`` names the layer, phase or epoch."""

    def __init__(self, message, **where):
        self.where = where
        if where:
            message = f"{message} ({', '.join(f'{k}={v}' for k, v in where.items())})"
        super().__init__(message)
