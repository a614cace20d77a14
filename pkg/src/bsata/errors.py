"""Exception hierarchy shared across the package."""


class BSaTaError(Exception):
    """Base class for all package errors."""


class InsufficientSamples(BSaTaError):
    pass


class ShapeMismatch(BSaTaError):
    pass


class MissingShapeMap(BSaTaError):
    def __init__(self, indices, modality=None):
        self.indices = list(indices)
        self.modality = modality
        where = f" ({modality})" if modality else ""
        super().__init__(f"records without shape_map{where}: {self.indices}")


class UnknownIdentity(BSaTaError):
    pass


class DegenerateRow(BSaTaError):
    pass


class EmptyPositiveSet(BSaTaError):
    pass


class NonSquare(BSaTaError):
    pass


class LabelOutOfRange(BSaTaError):
    pass


class PairingMismatch(BSaTaError):
    pass


class NoPositive(BSaTaError):
    def __init__(self, anchor):
        self.anchor = int(anchor)
        super().__init__(f"anchor {self.anchor} has no positive in batch")


class NoNegative(BSaTaError):
    def __init__(self, anchor):
        self.anchor = int(anchor)
        super().__init__(f"anchor {self.anchor} has no negative in batch")


class OutOfRange(BSaTaError):
    pass


class NonFiniteLoss(BSaTaError):
    def __init__(self, step, terms=None):
        self.step = step
        self.terms = terms or {}
        super().__init__(f"non-finite loss at step {step}: {self.terms}")


class ManifestMismatch(BSaTaError):
    pass


class CheckpointWriteFailure(BSaTaError):
    pass


class EmptyGalleryForIdentity(BSaTaError):
    pass


class MissingFile(BSaTaError):
    def __init__(self, paths):
        self.paths = list(paths)
        shown = ", ".join(str(p) for p in self.paths[:10])
        more = f" (+{len(self.paths) - 10} more)" if len(self.paths) > 10 else ""
        super().__init__(f"missing files: {shown}{more}")


class UnknownLayout(BSaTaError):
    pass


class MapNotFound(BSaTaError):
    pass
