import collections
import subprocess
import sys

out = subprocess.run('grep -i error ' + sys.argv[1], shell=True, capture_output=True, text=True)
print(collections.Counter(out.stdout.splitlines()).most_common(10))
