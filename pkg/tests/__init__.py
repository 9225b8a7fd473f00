# This file exists to make the tests directory a proper Python package.
# Its presence allows pytest to correctly import test modules and fixtures. 