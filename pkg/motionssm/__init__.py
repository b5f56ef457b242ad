from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version('motionssm')
except PackageNotFoundError:
    # Running from a source checkout that was never installed
    __version__ = None
