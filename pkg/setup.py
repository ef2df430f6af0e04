from setuptools import setup

# This setup.py is kept for backward compatibility.
# The actual configuration is in pyproject.toml.

if __name__ == "__main__":
    setup()