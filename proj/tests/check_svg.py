# Copyright 2026 The ibq Authors
#
# Licensed under the Apache License, Version 2.0 (the "License");
# you may not use this file except in compliance with the License.
# You may obtain a copy of the License at
#
#      http://www.apache.org/licenses/LICENSE-2.0
#
# Unless required by applicable law or agreed to in writing, software
# distributed under the License is distributed on an "AS IS" BASIS,
# WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
# See the License for the specific language governing permissions and
# limitations under the License.

"""Runs a small reproduction and parses every SVG with a strict XML parser."""

import pathlib
import subprocess
import sys
import tempfile
import xml.etree.ElementTree as ET

SVG_NS = "{http://www.w3.org/2000/svg}"


def main(cli):
    with tempfile.TemporaryDirectory() as tmp:
        out = pathlib.Path(tmp)
        runs = [
            ["reproduce", "SYN-TANH-8BIT", "--reps", "2", "--epochs", "4"],
            ["reproduce", "SYN-TANH-BINS-30", "--reps", "1", "--epochs", "2"],
        ]
        svgs = []
        for i, args in enumerate(runs):
            target = out / str(i)
            subprocess.run([cli, *args, "-q", "--out", str(target)], check=True)
            svgs += sorted(target.glob("*.svg"))
        if len(svgs) < 8:
            sys.exit(f"expected at least 8 SVG files, found {len(svgs)}")
        for path in svgs:
            root = ET.parse(path).getroot()
            if root.tag != SVG_NS + "svg" or root.get("version") != "1.1":
                sys.exit(f"{path.name}: root is not an SVG 1.1 element")
            print(f"ok {path.parent.name}/{path.name}")


if __name__ == "__main__":
    main(sys.argv[1])
