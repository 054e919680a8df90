"""
URL configuration for the vision_harness project.

Only the admin is routed; it lists recorded and queued evaluation runs.
"""
from django.contrib import admin
from django.urls import path

urlpatterns = [
    path('admin/', admin.site.urls),
]
