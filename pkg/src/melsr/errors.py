"""Exception hierarchy shared across the library."""


class MelsrError(Exception):
    """Base class for all library errors."""


# --- waveform I/O ---

class MalformedContainer(MelsrError):
    """File is not a parseable RIFF/WAVE container."""


class UnsupportedEncoding(MelsrError):
    """WAVE format code or bit depth outside PCM16 / IEEE float32."""


class EmptyAudio(MelsrError):
    """Container holds zero samples."""


class IoFailure(MelsrError):
    """Underlying OS write/read failure."""


# --- spectral analysis ---

class RateMismatch(MelsrError):
    """Buffer sample rate differs from the analysis configuration."""


class NonInvertibleConfig(MelsrError):
    """Window/hop combination cannot be inverted (overlap-add gap)."""


# --- filter design / degradation ---

class UnstableDesign(MelsrError):
    """Designed IIR filter has a pole on or outside the unit circle."""


class CutoffOutOfRange(MelsrError):
    """Requested cutoff is not inside (0, Nyquist)."""


class SilentInput(MelsrError):
    """Operation requires non-zero signal energy."""


# --- models ---

class ShapeMismatch(MelsrError):
    """Tensor shapes incompatible with the model or operation."""


class StepOutOfRange(MelsrError):
    """Diffusion step index outside the schedule."""


class DivergedTraining(MelsrError):
    """Training loss became NaN/Inf."""


class CheckpointMismatch(MelsrError):
    """Checkpoint metadata incompatible with requested configuration."""


class InputTooShort(MelsrError):
    """Input clip shorter than the pipeline minimum duration."""
