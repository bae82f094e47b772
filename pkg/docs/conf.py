#!/usr/bin/env python3
# -*- coding: utf-8 -*-
#
# ComBiNet documentation build configuration file.
#
# This file is execfile()d with the current directory set to its
# containing dir.

import os

# Read the version without importing combinet (and numpy)
_version = {}
with open(os.path.join(os.path.dirname(__file__), '..', 'combinet', 'version.py')) as fp:
    exec(fp.read(), _version)


# -- General configuration ------------------------------------------------

extensions = []

templates_path = ['_templates']

source_suffix = '.rst'

master_doc = 'index'

# General information about the project.
project = 'ComBiNet'
copyright = '2024, ComBiNet contributors'
author = 'ComBiNet contributors'

# The short X.Y version.
version = '.'.join(_version['__version__'].split('.')[:2])
# The full version, including alpha/beta/rc tags.
release = _version['__version__']

language = None

exclude_patterns = ['_build', 'Thumbs.db', '.DS_Store']

pygments_style = 'sphinx'

todo_include_todos = False


# -- Options for HTML output ----------------------------------------------

html_theme = "sphinx_rtd_theme"

html_static_path = ['_static']

html_sidebars = {
    '**': [
        'relations.html',  # needs 'show_related': True theme option to display
        'searchbox.html',
    ]
}


# -- Options for HTMLHelp output ------------------------------------------

htmlhelp_basename = 'ComBiNetdoc'


# -- Options for LaTeX output ---------------------------------------------

latex_elements = {}

latex_documents = [
    (master_doc, 'ComBiNet.tex', 'ComBiNet Documentation',
     'ComBiNet contributors', 'manual'),
]


# -- Options for manual page output ---------------------------------------

man_pages = [
    (master_doc, 'combinet', 'ComBiNet Documentation',
     [author], 1)
]


# -- Options for Texinfo output -------------------------------------------

texinfo_documents = [
    (master_doc, 'ComBiNet', 'ComBiNet Documentation',
     author, 'ComBiNet', 'Compact Bayesian segmentation networks.',
     'Miscellaneous'),
]
