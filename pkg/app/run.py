import os

from app.models import RunConfig
from app.tools import write_json


class Run:
    """One command invocation and its output directory."""

    def __init__(self):
        self.config: RunConfig = None

    def boot(self, config: RunConfig):
        self.config = config
        self.initializePaths()
        write_json(self.artifactPath("run_config.json"), config.model_dump())

    def initializePaths(self):
        if not os.path.exists(self.config.outdir):
            os.makedirs(self.config.outdir)

    def artifactPath(self, name):
        return os.path.join(self.config.outdir, name)

    def provenance(self):
        # hardware readings vary between reruns, so artifacts only carry the command config
        return self.config.model_dump(exclude={"hardware"})

    def writeJson(self, name, payload):
        payload = dict(payload)
        payload["run_config"] = self.provenance()
        path = self.artifactPath(name)
        write_json(path, payload)
        return path
