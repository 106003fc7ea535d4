"""
Holds the version information for the package

"""
__copyright__ = "Copyright (c) 2026, scalefusion_ts developers"
__status__ = 'beta'
__version_info__ = (0, 3, 0)
__version__ = '.'.join(map(str, __version_info__))
