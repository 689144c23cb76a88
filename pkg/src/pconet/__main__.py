from pconet.cli import entrypoint

entrypoint()
