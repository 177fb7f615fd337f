#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
Regenerates ``tox.ini`` from ``ci/templates`` and the ``[matrix]`` section
of ``setup.cfg`` (python version x numpy version).
"""
import os
import subprocess
import sys
from os.path import abspath
from os.path import dirname
from os.path import exists
from os.path import join


def ensure_env(env_path, bin_path):
    if exists(env_path):
        return
    print("Making bootstrap env in: {0} ...".format(env_path))
    subprocess.check_call([sys.executable, "-m", "venv", env_path])
    print("Installing `jinja2` and `matrix` into bootstrap environment...")
    subprocess.check_call([join(bin_path, "pip"), "install", "jinja2", "matrix"])


def environments(base_path):
    import matrix

    tox_environments = {}
    for (alias, conf) in matrix.from_file(join(base_path, "setup.cfg")).items():
        python = conf["python_versions"]
        tox_environments[alias] = {
            "python": "python" + python if "py" not in python else python,
            "deps": conf["dependencies"].split(),
        }
        if "coverage_flags" in conf:
            tox_environments[alias].update(cover={"false": False, "true": True}[conf["coverage_flags"].lower()])
        if "environment_variables" in conf:
            tox_environments[alias].update(env_vars=conf["environment_variables"].split())
    return tox_environments


def main():
    base_path = dirname(dirname(abspath(__file__)))
    print("Project path: {0}".format(base_path))
    env_path = join(base_path, ".tox", "bootstrap")
    bin_path = join(env_path, "Scripts" if sys.platform == "win32" else "bin")
    if abspath(sys.prefix) != abspath(env_path):
        ensure_env(env_path, bin_path)
        python = join(bin_path, "python")
        os.execv(python, [python, abspath(__file__)])

    import jinja2

    jinja = jinja2.Environment(
        loader=jinja2.FileSystemLoader(join(base_path, "ci", "templates")),
        trim_blocks=True,
        lstrip_blocks=True,
        keep_trailing_newline=True
    )
    tox_environments = environments(base_path)
    for name in os.listdir(join(base_path, "ci", "templates")):
        with open(join(base_path, name), "w") as fh:
            fh.write(jinja.get_template(name).render(tox_environments=tox_environments))
        print("Wrote {}".format(name))
    print("DONE.")


if __name__ == "__main__":
    main()
