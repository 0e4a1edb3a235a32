"""Thin scripting facade over an event cache built by the `ehr` pipeline.

The whole workflow is a few lines:

    import ehrfacade
    ds = ehrfacade.load("cache/")
    samples = ds.set_task("mortality", workers=2)
    for sample in samples:
        print(sample)
        break

The facade never touches the engine's internals: it reads the documented
file formats (manifest.json, samples.json, SMP1 shards, procstate
sidecars) and drives everything else through the `ehr` command line.
"""

from .core import FacadeDataset, FacadeError, SampleStream, load

__all__ = ["FacadeDataset", "FacadeError", "SampleStream", "load"]

__version__ = "0.1.0"
