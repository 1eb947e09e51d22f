from PIL import Image
import sys

img = Image.open(sys.argv[1])
img.thumbnail((int(sys.argv[2]), 10000))
img.save(sys.argv[3])
