# Configuration file for the Sphinx documentation builder.
#
# Only the options this project changes from the sphinx-quickstart defaults are listed. For the full list see
# http://www.sphinx-doc.org/en/master/config

import os
import sys
from os.path import dirname, abspath

import sphinx_rtd_theme

BASE_DIR = dirname(dirname(dirname(abspath(__file__))))
sys.path.insert(0, BASE_DIR)

PY_PATH = os.getenv('PYTHON_PATH', '')
if PY_PATH != '':
    PY_PATH = ':' + PY_PATH
os.environ['PYTHON_PATH'] = BASE_DIR + PY_PATH

from privex.permlab import VERSION  # noqa: E402

# -- Project information -----------------------------------------------------

project = 'Privex PermLab'
copyright = '2020, Privex Inc.'
author = 'Privex Inc.'

version = VERSION
release = VERSION

# -- General configuration ---------------------------------------------------

extensions = [
    'sphinx.ext.autodoc',
    'sphinx.ext.autosummary',
    'sphinx.ext.intersphinx',
    'sphinx.ext.viewcode',
    'sphinx.ext.mathjax',
    'sphinx_rtd_theme',
]

autosummary_generate = True
autosummary_generate_overwrite = False
autodoc_default_flags = ['members']

suppress_warnings = [
    'app.add_node',
    'ref.python'
]

source_suffix = '.rst'
master_doc = 'index'
pygments_style = None

# -- Options for HTML output -------------------------------------------------

html_theme = 'sphinx_rtd_theme'
html_theme_options = {
    'navigation_depth': 5,
    'collapse_navigation': False,
    'style_nav_header_background': '#473E53',
}
html_theme_path = [sphinx_rtd_theme.get_html_theme_path()]
htmlhelp_basename = 'PrivexPermLabDoc'

man_pages = [
    (master_doc, 'permlab', 'Privex PermLab Documentation', [author], 1)
]

intersphinx_mapping = {
    'python': ('https://docs.python.org/3.8', None),
    'numpy': ('https://numpy.org/doc/stable/', None),
    'attrs': ('https://www.attrs.org/en/stable/', None),
}
