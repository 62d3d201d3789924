# metaspk documentation build configuration file.
#
# Only the settings that differ from the Sphinx defaults are listed.

import sys, os

sys.path.insert(0, os.path.abspath(os.path.join('..', '..')))

extensions = ['sphinx.ext.autodoc', 'sphinx.ext.coverage',
              'sphinx.ext.viewcode', 'sphinx.ext.autosummary']

templates_path = ['_templates']
source_suffix = '.rst'
master_doc = 'index'

project = u'metaspk'
copyright = u'2024, the metaspk developers'

import metaspk
version = metaspk.__version__
release = metaspk.__version__

exclude_patterns = []
pygments_style = 'sphinx'

# Members are documented in declaration order, not alphabetically.
autodoc_member_order = 'bysource'
autosummary_generate = False

html_theme = 'furo'
html_title = "metaspk"
html_static_path = ['_static']
htmlhelp_basename = 'metaspkdoc'

man_pages = [
    ('index', 'metaspk', u'metaspk Documentation',
     [u'the metaspk developers'], 1)
]
